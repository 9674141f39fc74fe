"""Variance diagnostics for teacher logits and correlation/loss reports for trained encoders."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .data import PairSet, ScoredPair
from .encoder import EncoderParams, SentenceBatch, eval_embeddings
from .errors import DiagnosticError, InputError, ParameterError
from .logit_transform import TeacherEnsemble, average_teachers, member_logits
from .objectives import DEFAULT_TAU_S, DEFAULT_TAU_T, distill_loss


@dataclass(frozen=True)
class GaussianStats:
    mean: float
    std: float
    n: int

    @classmethod
    def fit(cls, samples) -> "GaussianStats":
        x = np.asarray(samples, dtype=np.float64).ravel()
        if x.size < 2:
            raise DiagnosticError(f"need at least 2 samples to fit, got {x.size}")
        std = float(x.std(ddof=1))
        if not std > 0:
            raise DiagnosticError("population has zero spread")
        return cls(float(x.mean()), std, int(x.size))


def gaussian_kl(a: GaussianStats, b: GaussianStats) -> float:
    """KL(N(a) || N(b)) in nats."""
    if not (a.std > 0 and b.std > 0):
        raise ParameterError(f"standard deviations must be positive, got {a.std}, {b.std}")
    return math.log(b.std / a.std) + (a.std ** 2 + (a.mean - b.mean) ** 2) / (2.0 * b.std ** 2) - 0.5


def histogram_kl(a, b, bins: int = 64) -> float:
    """KL between add-one-smoothed histograms over a shared equal-width grid."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi == lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    pa = np.histogram(a, edges)[0] + 1.0
    pb = np.histogram(b, edges)[0] + 1.0
    pa /= pa.sum()
    pb /= pb.sum()
    return float(np.sum(pa * np.log(pa / pb)))


def differential_entropy(std: float) -> float:
    """Differential entropy of a Gaussian with the given standard deviation."""
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    return math.log(std) + 0.5 * math.log(2.0 * math.pi * math.e)


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InputError(f"score sequences must be 1-D and equal length, got {x.shape}, {y.shape}")
    if x.size < 2 or np.all(x == x[0]) or np.all(y == y[0]):
        raise DiagnosticError("Spearman correlation is undefined for constant scores")
    rho = stats.spearmanr(x, y).statistic
    return float(np.clip(rho, -1.0, 1.0))


def _params(model) -> EncoderParams:
    return model.params if hasattr(model, "params") else model


def pair_similarities(model, pairs: Sequence[ScoredPair]) -> np.ndarray:
    """Evaluation-mode cosine similarity of each pair."""
    pairs = PairSet.of(pairs)
    ha, hb = eval_embeddings(_params(model), pairs.first), eval_embeddings(_params(model), pairs.second)
    return np.sum(ha * hb, axis=1)


def sts_spearman(model, pairs: Sequence[ScoredPair]) -> float:
    if len(pairs) < 3:
        raise InputError(f"need at least 3 scored pairs, got {len(pairs)}")
    pairs = PairSet.of(pairs)
    return spearman(pair_similarities(model, pairs), pairs.gold)


def ensemble_eval(teachers, pairs: Sequence[ScoredPair]) -> float:
    """Spearman of the members' averaged per-pair cosine against gold."""
    members = teachers.members if isinstance(teachers, TeacherEnsemble) else [_params(t) for t in teachers]
    if not members:
        raise ParameterError("ensemble_eval needs at least one member")
    if len(pairs) < 3:
        raise InputError(f"need at least 3 scored pairs, got {len(pairs)}")
    pairs = PairSet.of(pairs)
    acc = pair_similarities(members[0], pairs)
    for m in members[1:]:
        acc = acc + pair_similarities(m, pairs)
    return spearman(acc / len(members), pairs.gold)


def sharpness_curve(model, items, kind: str = "in-batch") -> np.ndarray:
    """Pairwise (in-batch) or per-pair (test-pairs) evaluation logits, sorted descending."""
    params = _params(model)
    if len(items) < 2:
        raise InputError(f"need at least 2 items, got {len(items)}")
    if kind == "in-batch":
        batch = items if isinstance(items, SentenceBatch) else SentenceBatch.of(items)
        h = eval_embeddings(params, batch)
        logits = (h @ h.T)[np.triu_indices(len(batch), k=1)]
    elif kind == "test-pairs":
        logits = pair_similarities(params, items)
    else:
        raise ParameterError(f"unknown sharpness kind {kind!r}")
    return np.sort(logits)[::-1]


def _first_order(params: EncoderParams, batch: SentenceBatch) -> np.ndarray:
    return eval_embeddings(params, batch).mean(axis=1)


def first_vs_second_order_stats(model, train_batches: Sequence[SentenceBatch], test_pairs: Sequence[ScoredPair]):
    """(first-order train, first-order test, second-order train, second-order test) Gaussian fits.

    First order: each sentence's mean embedding coordinate. Second order:
    cosine logits of in-batch pairs (train) or of the scored pairs (test).
    """
    if len(train_batches) < 2 or len(test_pairs) < 2:
        raise InputError("need at least 2 training batches and 2 test pairs")
    params = _params(model)
    first_train, second_train = [], []
    for batch in train_batches:
        h = eval_embeddings(params, batch)
        first_train.append(h.mean(axis=1))
        second_train.append((h @ h.T)[np.triu_indices(len(batch), k=1)])
    test_pairs = PairSet.of(test_pairs)
    first_test = np.concatenate([_first_order(params, test_pairs.first), _first_order(params, test_pairs.second)])
    second_test = pair_similarities(params, test_pairs)
    return (
        GaussianStats.fit(np.concatenate(first_train)),
        GaussianStats.fit(first_test),
        GaussianStats.fit(np.concatenate(second_train)),
        GaussianStats.fit(second_test),
    )


def cross_teacher_spearman(ensemble, batches: Sequence[SentenceBatch], top_k: int = 12) -> float:
    """Mean Spearman between teacher pairs on each row's first-teacher top-k off-diagonal logits.

    Averaged over ordered teacher pairs, rows and batches.
    """
    members = ensemble.members if isinstance(ensemble, TeacherEnsemble) else [_params(m) for m in ensemble]
    if len(members) < 2:
        raise ParameterError("cross-teacher Spearman needs at least two teachers")
    total, count = 0.0, 0
    for batch in batches:
        n = len(batch)
        if not 2 <= top_k <= n - 1:
            raise ParameterError(f"top_k must lie in [2, {n - 1}], got {top_k}")
        logits = [member_logits(m, batch) for m in members]
        off = ~np.eye(n, dtype=bool)
        rows = [l[off].reshape(n, n - 1) for l in logits]
        for a in range(len(members)):
            for b in range(len(members)):
                if a == b:
                    continue
                for i in range(n):
                    top = np.argsort(-rows[a][i], kind="stable")[:top_k]
                    total += spearman(rows[a][i][top], rows[b][i][top])
                    count += 1
    return total / count


def model_correlation_report(student, self_teacher, other_teachers, other_students, pairs) -> dict[str, float]:
    """Average Spearman between the student's pair scores and each reference group's.

    Groups: ``S.T.`` (its own teacher), ``O.T.`` (other teachers), ``O.S.``
    (other students). Empty groups are left out with a warning.
    """
    pairs = PairSet.of(pairs)
    base = pair_similarities(student, pairs)
    groups = {
        "S.T.": [self_teacher] if self_teacher is not None else [],
        "O.T.": list(other_teachers),
        "O.S.": list(other_students),
    }
    dims = _params(student).dims
    report = {}
    for name, models in groups.items():
        if not models:
            warnings.warn(f"group {name} is empty; omitted from the report", stacklevel=2)
            continue
        scores = []
        for m in models:
            if _params(m).dims != dims:
                raise ParameterError(f"model in group {name} has dims {_params(m).dims}, student has {dims}")
            scores.append(spearman(base, pair_similarities(m, pairs)))
        report[name] = float(np.mean(scores))
    return report


def distill_split_loss(student, teachers, batches: Sequence[SentenceBatch], tau_s=DEFAULT_TAU_S, tau_t=DEFAULT_TAU_T) -> float:
    """Mean distillation loss of deterministic student logits against averaged, unshuffled teacher logits."""
    params = _params(student)
    if not batches:
        raise InputError("split has no batches")
    members = teachers.members if isinstance(teachers, TeacherEnsemble) else [_params(t) for t in teachers]
    losses = [
        distill_loss(member_logits(params, batch), average_teachers(members, batch), tau_s, tau_t).item()
        for batch in batches
    ]
    return float(np.mean(losses))


def loss_gap_report(student, teachers, train_batches, test_batches, tau_s=DEFAULT_TAU_S, tau_t=DEFAULT_TAU_T) -> tuple[float, float]:
    """(train loss, test loss) of the student's distillation objective without any logit transform."""
    return (
        distill_split_loss(student, teachers, train_batches, tau_s, tau_t),
        distill_split_loss(student, teachers, test_batches, tau_s, tau_t),
    )


@dataclass
class DiagnosticsReport:
    first_order: tuple[GaussianStats, GaussianStats]
    second_order: tuple[GaussianStats, GaussianStats]
    kl_first: float
    kl_second: float
    diff_entropy: dict[str, float] = field(default_factory=dict)
    cross_teacher_spearman: float | None = None
    loss_gap: dict[str, tuple[float, float]] = field(default_factory=dict)
    sharpness: dict[str, np.ndarray] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for label, (train, test) in (("first_order", self.first_order), ("second_order", self.second_order)):
            for split, s in (("train", train), ("test", test)):
                out += [(f"{label}_mean", split, s.mean), (f"{label}_std", split, s.std)]
        out += [("kl_first", "train_vs_test", self.kl_first), ("kl_second", "train_vs_test", self.kl_second)]
        out += [(f"diff_entropy_{k}", "all", v) for k, v in self.diff_entropy.items()]
        if self.cross_teacher_spearman is not None:
            out.append(("cross_teacher_spearman", "train", self.cross_teacher_spearman))
        for method, (train, test) in self.loss_gap.items():
            out += [(f"distill_loss_{method}", "train", train), (f"distill_loss_{method}", "test", test)]
        return out

    def write(self, report_path, sharpness_path=None) -> None:
        for name, split, value in self.rows():
            if not math.isfinite(value):
                raise DiagnosticError(f"report field {name}/{split} is not finite")
        with open(report_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "split", "value"])
            for name, split, value in self.rows():
                w.writerow([name, split, repr(float(value))])
        if sharpness_path is not None:
            with open(sharpness_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["rank", "logit", "label"])
                for label, curve in self.sharpness.items():
                    for rank, value in enumerate(curve, start=1):
                        w.writerow([rank, repr(float(value)), label])


def build_report(model, train_batches, test_pairs, ensemble=None, top_k: int = 12) -> DiagnosticsReport:
    f_tr, f_te, s_tr, s_te = first_vs_second_order_stats(model, train_batches, test_pairs)
    report = DiagnosticsReport(
        first_order=(f_tr, f_te),
        second_order=(s_tr, s_te),
        kl_first=gaussian_kl(f_tr, f_te),
        kl_second=gaussian_kl(s_tr, s_te),
        diff_entropy={"first_order": differential_entropy(f_tr.std), "second_order": differential_entropy(s_tr.std)},
        sharpness={
            "in-batch": sharpness_curve(model, train_batches[0], "in-batch"),
            "test-pairs": sharpness_curve(model, test_pairs, "test-pairs"),
        },
    )
    if ensemble is not None and len(ensemble) >= 2:
        report.cross_teacher_spearman = cross_teacher_spearman(ensemble, train_batches, top_k)
    return report


def teacher_spread(ensemble, batch: SentenceBatch) -> tuple[float, float]:
    """Average across-teacher std of the first-order variable and of the off-diagonal logits."""
    members = ensemble.members if isinstance(ensemble, TeacherEnsemble) else [_params(m) for m in ensemble]
    if len(members) < 2:
        raise ParameterError("teacher spread needs at least two teachers")
    n = len(batch)
    first, second = [], []
    for m in members:
        h = eval_embeddings(m, batch)
        first.append(h.mean(axis=1))
        second.append((h @ h.T)[~np.eye(n, dtype=bool)])
    first, second = np.stack(first), np.stack(second)
    return float(first.std(axis=0, ddof=1).mean()), float(second.std(axis=0, ddof=1).mean())
