"""Teacher-logit regularizers: Group-P shuffling, rank-interval shuffling, multi-teacher averaging."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numeric as nm
from .encoder import EncoderParams, SentenceBatch, logit_embeddings
from .errors import EnsembleError, ParameterError

# slack when mapping cumulative probabilities onto p-intervals, so that
# G = k*p computed with rounding error still lands in interval k-1
_INTERVAL_TOL = 1e-9


@dataclass(frozen=True)
class GroupAssignment:
    cumulative: np.ndarray  # G per position
    interval: np.ndarray  # ceil(G / p) - 1
    group: np.ndarray  # interval ids relabelled densely from 0

    def members(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.group == g) for g in range(int(self.group.max()) + 1)]


def _as_row(row) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.size == 0:
        raise ParameterError("a logit row must be a non-empty 1-D sequence")
    return row


def sorted_cumulative(row) -> np.ndarray:
    """G(t_j): total softmax mass (temperature 1) of every entry >= t_j."""
    row = _as_row(row)
    probs = nm.softmax_row(row, 1.0)
    order = np.argsort(-row, kind="stable")
    csum = np.cumsum(probs[order])
    sorted_vals = row[order]
    # a tie block shares the cumulative value at its last member
    g_sorted = csum.copy()
    for k in range(len(order) - 2, -1, -1):
        if sorted_vals[k] == sorted_vals[k + 1]:
            g_sorted[k] = g_sorted[k + 1]
    g = np.empty_like(row)
    g[order] = g_sorted
    return g


def group_assignment(row, p: float) -> GroupAssignment:
    if not 0 < p <= 1:
        raise ParameterError(f"p must lie in (0, 1], got {p}")
    g = sorted_cumulative(row)
    # a partial trailing interval (when 1/p is not an integer) stays its own group
    interval = np.maximum(np.ceil(g / p - _INTERVAL_TOL).astype(np.int64) - 1, 0)
    _, group = np.unique(interval, return_inverse=True)
    return GroupAssignment(g, interval, group.reshape(-1))


def group_p_shuffle(row, p: float, rng: np.random.Generator) -> np.ndarray:
    """Permute values uniformly within each G-interval of width ``p``; groups never exchange values."""
    row = _as_row(row)
    out = row.copy()
    for idx in group_assignment(row, p).members():
        if idx.size > 1:
            out[idx] = row[idx[rng.permutation(idx.size)]]
    return out


def rank_interval_shuffle(row, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    """Permute the values holding descending ranks lo..hi (1-based, ties by position) among their positions."""
    row = _as_row(row)
    if not 1 <= lo <= hi <= row.size:
        raise ParameterError(f"rank interval [{lo}, {hi}] invalid for a row of length {row.size}")
    order = np.argsort(-row, kind="stable")
    idx = np.sort(order[lo - 1:hi])
    out = row.copy()
    if idx.size > 1:
        out[idx] = row[idx[rng.permutation(idx.size)]]
    return out


@dataclass(frozen=True)
class ShuffleMode:
    kind: str = "none"  # none | group-p | rank-interval
    p: float = 0.1
    lo: int = 1
    hi: int = 12

    def __post_init__(self):
        if self.kind not in ("none", "group-p", "rank-interval"):
            raise ParameterError(f"unknown shuffle mode {self.kind!r}")
        if self.kind == "group-p" and not 0 < self.p <= 1:
            raise ParameterError(f"p must lie in (0, 1], got {self.p}")
        if self.kind == "rank-interval" and not 1 <= self.lo <= self.hi:
            raise ParameterError(f"bad rank interval [{self.lo}, {self.hi}]")


def shuffle_teacher_logits(teacher: np.ndarray, mode: ShuffleMode, rng: np.random.Generator) -> np.ndarray:
    """Apply ``mode`` to the off-diagonal part of every row; the diagonal is left in place."""
    teacher = nm.as_matrix(teacher)
    if mode.kind == "none":
        return teacher.copy()
    n = teacher.shape[0]
    out = teacher.copy()
    for i in range(n):
        cols = np.r_[0:i, i + 1:n]
        row = teacher[i, cols]
        if mode.kind == "group-p":
            out[i, cols] = group_p_shuffle(row, mode.p, rng)
        else:
            out[i, cols] = rank_interval_shuffle(row, mode.lo, min(mode.hi, row.size), rng)
    return out


@dataclass
class TeacherEnsemble:
    members: list[EncoderParams]

    def __post_init__(self):
        if not self.members:
            raise EnsembleError("an ensemble needs at least one member")
        dims = {m.dims for m in self.members}
        vocab = {m.vocab for m in self.members}
        if len(dims) > 1 or len(vocab) > 1:
            raise EnsembleError(f"ensemble members disagree on shape: dims {sorted(dims)}, vocab {sorted(vocab)}")

    def __len__(self):
        return len(self.members)

    @property
    def dims(self):
        return self.members[0].dims


def member_logits(member: EncoderParams, batch: SentenceBatch) -> np.ndarray:
    h = logit_embeddings(member, batch)
    return h @ h.T


def average_teachers(ensemble: TeacherEnsemble | Sequence[EncoderParams], batch: SentenceBatch, threads: int = 1) -> np.ndarray:
    """Mean of the members' raw cosine logit matrices, reduced in member order."""
    if not isinstance(ensemble, TeacherEnsemble):
        ensemble = TeacherEnsemble(list(ensemble))
    if threads > 1 and len(ensemble) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            logits = list(pool.map(lambda m: member_logits(m, batch), ensemble.members))
    else:
        logits = [member_logits(m, batch) for m in ensemble.members]
    acc = logits[0].copy()
    for extra in logits[1:]:
        acc += extra
    return acc / len(logits)
