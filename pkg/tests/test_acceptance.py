"""The ten acceptance criteria, each reported as one pass/fail line."""

import itertools
import math
import time
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

import desk
from dlab import numeric as nm
from dlab import training
from dlab.cli import run
from dlab.diagnostics import (
    differential_entropy,
    ensemble_eval,
    first_vs_second_order_stats,
    gaussian_kl,
    loss_gap_report,
    sts_spearman,
)
from dlab.encoder import SentenceBatch, encode, encode_pair, init_params, param_leaves
from dlab.logit_transform import TeacherEnsemble, average_teachers, group_assignment, group_p_shuffle, member_logits
from dlab.objectives import DistillConfig, combined_loss, contrastive_loss, distill_loss, similarity_logits
from dlab.rng import stream


def _gradient_instance(trial):
    rng = np.random.default_rng(trial)
    vocab = int(rng.integers(6, 16))
    dims = tuple(int(d) for d in rng.integers(2, 5, 3))
    n = int(rng.integers(2, 5))
    params = init_params(vocab, dims, 0.1, seed=trial)
    batch = SentenceBatch.of([rng.integers(0, vocab, rng.integers(1, 5)) for _ in range(n)])
    teacher = rng.uniform(-1, 1, (n, n))
    lam = float(rng.uniform(0, 2))
    tau, tau_s, tau_t = np.exp(rng.uniform(math.log(0.1), 0.0, 3))

    def objective(leaves):
        v1 = encode(params, batch, 2 * trial, True, leaves=leaves)
        v2 = encode(params, batch, 2 * trial + 1, True, leaves=leaves)
        s = similarity_logits(v1, v2)
        return combined_loss(contrastive_loss(s, tau), distill_loss(s, teacher, tau_s, tau_t), lam)

    return objective, params.arrays()


def test_c1_gradient_check(acceptance):
    start = time.perf_counter()
    worst = max(nm.finite_diff_check(*_gradient_instance(trial)) for trial in range(100))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 30
    acceptance(1, ok, f"max relative error {worst:.2e} over 100 instances in {elapsed:.1f}s")
    assert ok


def test_c2_group_p_suite(acceptance):
    rng = np.random.default_rng(2024)
    bad_multiset = cross = not_identity = 0
    for trial in range(10_000):
        n = int(rng.integers(1, 64))
        row = rng.uniform(-1, 1, n)
        p = float(rng.uniform(0.01, 1.0))
        out = group_p_shuffle(row, p, stream(trial, "c2"))
        if sorted(out.tolist()) != sorted(row.tolist()):
            bad_multiset += 1
        group = group_assignment(row, p).group
        origin = {v: j for j, v in enumerate(row.tolist())}
        cross += sum(group[origin[v]] != group[j] for j, v in enumerate(out.tolist()))
        probs = np.exp(row - row.max())
        probs /= probs.sum()
        small = probs.min() * float(rng.uniform(0.5, 0.999))
        if not np.array_equal(group_p_shuffle(row, small, stream(trial, "c2-id")), row):
            not_identity += 1

    base = np.array([0.4, 0.1, -0.2, -0.7])
    draws = 24_000
    counts = Counter(tuple(group_p_shuffle(base, 1.0, stream(k, "c2-chi"))) for k in range(draws))
    observed = [counts.get(tuple(base[list(perm)]), 0) for perm in itertools.permutations(range(4))]
    pvalue = chisquare(observed).pvalue
    ok = bad_multiset == 0 and cross == 0 and not_identity == 0 and sum(observed) == draws and pvalue > 0.01
    acceptance(2, ok, f"multiset errors {bad_multiset}, cross-group moves {cross}, "
                      f"non-identity below min prob {not_identity}, chi2 p={pvalue:.3f}")
    assert ok


def _averaged_logits(base, batch, m, trial, sigma):
    members = []
    for k in range(m):
        rng = stream(7, "c3", m, trial, k)
        members.append(base.with_arrays([a + sigma * rng.standard_normal(a.shape) for a in base.arrays()]))
    return average_teachers(members, batch)


def test_c3_clt_variance_reduction(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    base = init_params(50, (8, 16, 8), 0.1, seed=3)
    batch = SentenceBatch.of([rng.integers(0, 50, 6) for _ in range(6)])
    off = ~np.eye(6, dtype=bool)
    trials = 1000
    std = {}
    for m in (1, 4, 16):
        samples = np.stack([_averaged_logits(base, batch, m, t, 0.02)[off] for t in range(trials)])
        std[m] = math.sqrt(samples.var(axis=0, ddof=1).mean())
    ratios = {m: std[m] / std[1] for m in (4, 16)}
    within = all(abs(ratios[m] * math.sqrt(m) - 1.0) <= 0.15 for m in ratios)
    elapsed = time.perf_counter() - start
    ok = within and elapsed < 60
    acceptance(3, ok, f"std ratio M=4 {ratios[4]:.4f} (target 0.5), M=16 {ratios[16]:.4f} (target 0.25) in {elapsed:.1f}s")
    assert ok


def test_c4_differential_entropy(acceptance):
    first, second = differential_entropy(2.177e-5), differential_entropy(0.0406)
    ok = abs(first + 9.3160) <= 5e-4 and abs(second + 1.7853) <= 5e-4
    acceptance(4, ok, f"first order {first:.4f} (ref -9.3160), second order {second:.4f} (ref -1.7853)")
    assert ok


def test_c5_self_distillation_fixed_point(acceptance):
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(2, 9))
        tau = float(rng.uniform(0.01, 1.0))
        t = rng.uniform(-1, 1, (n, n))
        s = nm.Tensor(t.copy(), requires_grad=True)
        worst = max(worst, float(np.linalg.norm(nm.backward(distill_loss(s, t, tau, tau))[s])))
        # through the encoder: dropout off, so the student views equal the teacher pass
        params = init_params(30, (4, 6, 4), 0.0, seed=trial)
        batch = SentenceBatch.of([rng.integers(0, 30, 4) for _ in range(n)])
        leaves = param_leaves(params)
        v1, v2 = encode_pair(params, batch, trial, leaves=leaves)
        grads = nm.backward(distill_loss(similarity_logits(v1, v2), member_logits(params, batch), tau, tau))
        worst = max(worst, max(float(np.linalg.norm(grads[leaf])) for leaf in leaves))
    ok = worst <= 1e-8
    acceptance(5, ok, f"max gradient norm {worst:.2e}")
    assert ok


def test_c6_loss_gap(acceptance):
    _, train_batches, test_batches = desk.reference_data()
    wins, gaps, seconds = 0, [], 0.0
    for seed in desk.SEEDS:
        r = desk.seed_run(seed)
        teacher = [r.teachers[0].params]
        tr_v, te_v = loss_gap_report(r.vanilla.params, teacher, train_batches, test_batches, 0.02, 0.01)
        tr_g, te_g = loss_gap_report(r.group_p.params, teacher, train_batches, test_batches, 0.02, 0.01)
        gaps.append((te_v - tr_v, te_g - tr_g))
        wins += (te_v - tr_v) > (te_g - tr_g)
        seconds += r.seconds["teacher0"] + r.seconds["vanilla"] + r.seconds["group_p"]
    ok = wins >= 4 and seconds < 600
    detail = ", ".join(f"{v:.3f}>{g:.3f}" for v, g in gaps)
    acceptance(6, ok, f"vanilla gap > group-p gap on {wins}/5 seeds ({detail}); training {seconds:.0f}s")
    assert ok


def test_c7_student_beats_vanilla_and_ensemble(acceptance):
    data, _, _ = desk.reference_data()
    wins, rows, seconds = 0, [], 0.0
    for seed in desk.SEEDS:
        r = desk.seed_run(seed)
        student = sts_spearman(r.group_p_avg.params, data.test_pairs)
        vanilla = sts_spearman(r.vanilla.params, data.test_pairs)
        ensemble = ensemble_eval([t.params for t in r.teachers], data.test_pairs)
        rows.append(f"{student:.3f}/{vanilla:.3f}/{ensemble:.3f}")
        wins += student >= vanilla and student >= ensemble
        seconds += sum(r.seconds[k] for k in ("teacher0", "teacher1", "teacher2", "teacher3", "vanilla", "group_p_avg"))
    ok = wins >= 4 and seconds < 900
    acceptance(7, ok, f"group-p+avg >= vanilla and ensemble on {wins}/5 seeds "
                      f"(student/vanilla/ensemble: {', '.join(rows)}); training {seconds:.0f}s")
    assert ok


def test_c8_second_order_shift(acceptance):
    data, train_batches, _ = desk.reference_data()
    wins, rows = 0, []
    for seed in desk.SEEDS:
        model = desk.seed_run(seed).teachers[0].params
        f_tr, f_te, s_tr, s_te = first_vs_second_order_stats(model, train_batches, data.test_pairs)
        kl_first, kl_second = gaussian_kl(f_tr, f_te), gaussian_kl(s_tr, s_te)
        rows.append(f"{kl_second:.3g}>{kl_first:.3g}")
        wins += kl_second > kl_first
    ok = wins == 5
    acceptance(8, ok, f"kl_second > kl_first on {wins}/5 seeds ({', '.join(rows)})")
    assert ok


PIPELINE_CFG = """\
train-sentences = 1000
test-sentences = 200
dev-pairs = 200
test-pairs = 200
steps = 40
eval-interval = 10
seed = 11
"""


def _pipeline(root, threads):
    cfg = root / "run.cfg"
    root.mkdir()
    cfg.write_text(PIPELINE_CFG)
    common = ["--config", str(cfg)]
    assert run(["gen-data", *common, "--out", str(root / "data")]) == 0
    teachers = []
    for k in range(3):
        out = root / f"teacher{k}"
        assert run(["train-teacher", *common, "--data", str(root / "data"), "--out", str(out), "--seed", str(100 + k)]) == 0
        teachers.append(str(out / "checkpoint-r0.bin"))
    student = root / "student"
    assert run(["distill", *common, "--data", str(root / "data"), "--out", str(student), "--teachers", *teachers,
                "--shuffle", "group-p", "--p", "0.1", "--threads", str(threads)]) == 0
    return [root / f"teacher{k}" / "metrics.csv" for k in range(3)] + [student / "metrics.csv"]


def test_c9_determinism(tmp_path, acceptance):
    a = _pipeline(tmp_path / "a", 4)
    b = _pipeline(tmp_path / "b", 4)
    c = _pipeline(tmp_path / "c", 1)
    same = all(x.read_bytes() == y.read_bytes() == z.read_bytes() for x, y, z in zip(a, b, c))
    ok = same and all(x.stat().st_size > 0 for x in a)
    acceptance(9, ok, f"{len(a)} metrics CSVs byte-identical across two --threads 4 runs and a --threads 1 run: {same}")
    assert ok


def test_c10_round_handoff(monkeypatch, acceptance):
    data, _, _ = desk.reference_data()
    corpus = data.train.__class__(data.train.sentences[:640], data.train.vocab)
    cfg = training.TrainConfig(steps=20, eval_interval=10, ensemble_size=1, dims=(8, 12, 8), seed=5)
    consumed = []
    real = training._teacher_logits

    def spy(teachers, batch, c, step):
        out = real(teachers, batch, c, step)
        consumed.append((teachers, batch, out.copy()))
        return out

    monkeypatch.setattr(training, "_teacher_logits", spy)
    rounds = training.self_train(corpus, data.dev_pairs[:100], cfg, 2)
    round1 = rounds[1][0].params
    # the second half of the spy log belongs to round 2, whose teacher is the round-1 student
    round2_calls = consumed[cfg.steps:]
    in_training = all(np.array_equal(out, member_logits(round1, batch)) for _, batch, out in round2_calls)
    probe = SentenceBatch.of(data.test.sentences[:64])
    teacher_view = average_teachers(TeacherEnsemble([round1.copy()]), probe)
    h = encode(round1, probe, train_mode=False, use_head=True).values
    on_probe = np.array_equal(teacher_view, h @ h.T)
    ok = len(round2_calls) == cfg.steps and in_training and on_probe
    acceptance(10, ok, f"round-2 teacher logits bit-equal to round-1 student logits: "
                       f"{len(round2_calls)} training batches {in_training}, probe batch {on_probe}")
    assert ok
