"""Teacher training, student distillation, iterative self-training rounds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numeric as nm
from .data import Corpus, PairSet, ScoredPair, batch_iter, batches_per_epoch
from .diagnostics import sts_spearman
from .encoder import (
    DEFAULT_DIMS,
    DEFAULT_DROPOUT,
    EncoderParams,
    SentenceBatch,
    encode_pair,
    init_params,
    param_leaves,
)
from .errors import EnsembleError, InputError, ParameterError, TrainingError
from .logit_transform import ShuffleMode, TeacherEnsemble, average_teachers, shuffle_teacher_logits
from .objectives import DistillConfig, combined_loss, contrastive_loss, distill_loss, similarity_logits
from .rng import derive_seed, stream

METRIC_COLUMNS = ("step", "cl_loss", "distill_loss", "total_loss", "dev_spearman")


@dataclass(frozen=True)
class TrainConfig:
    steps: int | None = None  # None: one epoch over the corpus
    lr: float = 1e-3
    eval_interval: int = 125
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    distill: DistillConfig = DistillConfig()
    seed: int = 0
    shuffle: ShuffleMode = ShuffleMode()
    ensemble_size: int = 4
    dims: tuple[int, int, int] = DEFAULT_DIMS
    dropout: float = DEFAULT_DROPOUT
    teacher_dropout: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.eval_interval < 1:
            raise ParameterError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.steps is not None and self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if not self.lr > 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")
        if self.ensemble_size < 1:
            raise ParameterError(f"ensemble size must be >= 1, got {self.ensemble_size}")
        if self.threads < 1:
            raise ParameterError(f"threads must be >= 1, got {self.threads}")


@dataclass
class Checkpoint:
    params: EncoderParams
    round: int
    dev_score: float
    step: int
    history: list[tuple[int, float]] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list, repr=False)

    def meta(self) -> dict:
        return {"round": self.round, "step": self.step, "dev_score": float(self.dev_score)}


class Adam:
    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def select_checkpoint(history: Sequence[tuple[int, float]]) -> int:
    """Step with the highest dev score; the earliest such step on ties."""
    if not history:
        raise InputError("checkpoint history is empty")
    best_step, best_score = history[0]
    for step, score in history[1:]:
        if score > best_score:
            best_step, best_score = step, score
    return best_step


def _teacher_logits(teachers: TeacherEnsemble, batch: SentenceBatch, cfg: TrainConfig, step: int) -> np.ndarray:
    if not cfg.teacher_dropout:
        return average_teachers(teachers, batch, cfg.threads)
    acc = None
    for m, member in enumerate(teachers.members):
        v1, v2 = encode_pair(member, batch, derive_seed(cfg.seed, "teacher-dropout", step, m))
        logits = v1.values @ v2.values.T
        acc = logits if acc is None else acc + logits
    return acc / len(teachers)


def _fit(corpus: Corpus, dev: Sequence[ScoredPair], cfg: TrainConfig, round_index: int,
         teachers: TeacherEnsemble | None) -> Checkpoint:
    if len(corpus) < 2:
        raise InputError(f"corpus needs at least 2 sentences, got {len(corpus)}")
    dcfg = cfg.distill
    n = min(dcfg.batch_size, len(corpus))
    per_epoch = batches_per_epoch(corpus, n)
    steps = per_epoch if cfg.steps is None else cfg.steps

    params = init_params(corpus.vocab, cfg.dims, cfg.dropout, derive_seed(cfg.seed, "init"))
    if teachers is not None and teachers.dims != params.dims:
        raise EnsembleError(f"teacher dims {teachers.dims} differ from student dims {params.dims}")
    opt = Adam(params.arrays(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    dev = PairSet.of(dev)

    score = sts_spearman(params, dev)
    history = [(0, score)]
    best = (score, 0, params.copy())
    metrics: list[dict] = []
    epoch_cache: tuple[int, list[SentenceBatch]] | None = None

    for step in range(1, steps + 1):
        epoch, k = divmod(step - 1, per_epoch)
        if epoch_cache is None or epoch_cache[0] != epoch:
            epoch_cache = (epoch, batch_iter(corpus, n, cfg.seed, epoch))
        batch = epoch_cache[1][k]

        leaves = param_leaves(params)
        try:
            v1, v2 = encode_pair(params, batch, derive_seed(cfg.seed, "dropout", step), leaves=leaves)
            logits = similarity_logits(v1, v2)
            cl = contrastive_loss(logits, dcfg.tau)
            dl = None
            loss = cl
            if teachers is not None:
                target = _teacher_logits(teachers, batch, cfg, step)
                target = shuffle_teacher_logits(target, cfg.shuffle, stream(cfg.seed, "shuffle", step))
                dl = distill_loss(logits, target, dcfg.tau_s, dcfg.tau_t)
                loss = combined_loss(cl, dl, dcfg.lam)
        except ArithmeticError as exc:
            raise TrainingError(f"loss diverged ({exc})", step) from exc
        if not math.isfinite(loss.item()):
            raise TrainingError("loss is not finite", step)
        grads = nm.backward(loss)
        opt.step([grads[leaf] for leaf in leaves])

        row = {"step": step, "cl_loss": cl.item(), "distill_loss": dl.item() if dl is not None else "",
               "total_loss": loss.item(), "dev_spearman": ""}
        if step % cfg.eval_interval == 0 or step == steps:
            score = sts_spearman(params, dev)
            history.append((step, score))
            row["dev_spearman"] = score
            if score > best[0]:
                best = (score, step, params.copy())
        metrics.append(row)

    chosen = select_checkpoint(history)
    assert chosen == best[1]
    return Checkpoint(best[2], round_index, best[0], chosen, history, metrics)


def train_teacher(corpus: Corpus, dev: Sequence[ScoredPair], cfg: TrainConfig = TrainConfig()) -> Checkpoint:
    """Contrastive training only; returns the best-dev checkpoint as round 0."""
    return _fit(corpus, dev, cfg, 0, None)


def distill_student(corpus: Corpus, dev: Sequence[ScoredPair], teachers, cfg: TrainConfig = TrainConfig(),
                    round_index: int = 1) -> Checkpoint:
    """Fresh student trained on contrastive loss plus distillation from the (averaged, shuffled) teachers."""
    if not isinstance(teachers, TeacherEnsemble):
        teachers = TeacherEnsemble([t.params if isinstance(t, Checkpoint) else t for t in teachers])
    return _fit(corpus, dev, cfg, round_index, teachers)


def member_config(cfg: TrainConfig, round_index: int, member: int) -> TrainConfig:
    return replace(cfg, seed=derive_seed(cfg.seed, "round", round_index, "member", member))


def self_train(corpus: Corpus, dev: Sequence[ScoredPair], cfg: TrainConfig = TrainConfig(),
               rounds: int = 1) -> list[list[Checkpoint]]:
    """Round 0: ``ensemble_size`` teachers. Round r+1: students distilled from all round-r checkpoints.

    Intermediate rounds train ``ensemble_size`` students so the next round
    keeps a full ensemble; the final round trains a single student.
    """
    if rounds < 1:
        raise ParameterError(f"rounds must be >= 1, got {rounds}")
    m = cfg.ensemble_size
    history = [[train_teacher(corpus, dev, member_config(cfg, 0, k)) for k in range(m)]]
    for r in range(1, rounds + 1):
        ensemble = TeacherEnsemble([c.params for c in history[-1]])
        count = 1 if r == rounds else m
        history.append([distill_student(corpus, dev, ensemble, member_config(cfg, r, k), r) for k in range(count)])
    return history


def write_metrics(path, metrics: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for row in metrics:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
