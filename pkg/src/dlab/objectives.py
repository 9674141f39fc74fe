"""Contrastive, distillation and combined training objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .encoder import EmbeddingBatch
from .errors import NumericError, ParameterError, ShapeError
from .numeric import Tensor

DEFAULT_TAU = 0.05
DEFAULT_TAU_S = 0.02
DEFAULT_TAU_T = 0.01
DEFAULT_LAMBDA = 1.0
DEFAULT_P = 0.1
DEFAULT_BATCH_SIZE = 64


@dataclass(frozen=True)
class DistillConfig:
    tau: float = DEFAULT_TAU
    tau_s: float = DEFAULT_TAU_S
    tau_t: float = DEFAULT_TAU_T
    lam: float = DEFAULT_LAMBDA
    p: float = DEFAULT_P
    batch_size: int = DEFAULT_BATCH_SIZE
    rounds: int = 1

    def __post_init__(self):
        for name in ("tau", "tau_s", "tau_t"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lam >= 0:
            raise ParameterError(f"lambda must be non-negative, got {self.lam}")
        if not 0 < self.p <= 1:
            raise ParameterError(f"p must lie in (0, 1], got {self.p}")
        if self.batch_size < 2:
            raise ParameterError(f"batch size must be >= 2, got {self.batch_size}")
        if self.rounds < 1:
            raise ParameterError(f"rounds must be >= 1, got {self.rounds}")


def _as_view(x):
    return x.view if isinstance(x, EmbeddingBatch) else x


def similarity_logits(view1, view2) -> Tensor:
    """Entry (i, j) is the dot product of view1 row i with view2 row j."""
    a, b = nm._t(_as_view(view1)), nm._t(_as_view(view2))
    if a.shape != b.shape:
        raise ShapeError(f"views differ in shape: {a.shape} vs {b.shape}")
    return nm.matmul(a, nm.transpose(b))


def off_diagonal_mask(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def contrastive_loss(logits, tau: float = DEFAULT_TAU) -> Tensor:
    """Mean over rows of -log softmax(row / tau)[diagonal]; the positive stays in the denominator."""
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    logits = nm._t(logits)
    n = logits.shape[0]
    if logits.shape != (n, n):
        raise ShapeError(f"logit matrix must be square, got {logits.shape}")
    log_p = nm.log_softmax_rows(logits, tau)
    return nm.scale(nm.total(nm.mul(log_p, np.eye(n))), -1.0 / n)


def teacher_distribution(teacher: np.ndarray, tau_t: float = DEFAULT_TAU_T) -> np.ndarray:
    """Row softmax of teacher logits over j != i, zero on the diagonal."""
    teacher = nm.as_matrix(teacher)
    return nm.softmax_rows(teacher, tau_t, off_diagonal_mask(teacher.shape[0])).value


def distill_loss(student, teacher, tau_s: float = DEFAULT_TAU_S, tau_t: float = DEFAULT_TAU_T) -> Tensor:
    """Cross entropy of the student's off-diagonal row distributions against the teacher's, averaged over rows.

    The teacher is a constant target: no gradient flows into it.
    """
    student = nm._t(student)
    teacher = teacher.value if isinstance(teacher, Tensor) else nm.as_matrix(teacher)
    n = student.shape[0]
    if student.shape != (n, n) or teacher.shape != (n, n):
        raise ShapeError(f"student {student.shape} and teacher {teacher.shape} must be matching square matrices")
    if n < 2:
        raise ShapeError("distillation needs at least two sentences per batch")
    mask = off_diagonal_mask(n)
    q = teacher_distribution(teacher, tau_t)
    log_p = nm.log_softmax_rows(student, tau_s, mask)
    return nm.scale(nm.total(nm.mul(log_p, q)), -1.0 / n)


def combined_loss(cl, distill, lam: float = DEFAULT_LAMBDA):
    """cl + lam * distill. Works on tensors (graph mode) or plain floats."""
    if not lam >= 0:
        raise ParameterError(f"lambda must be non-negative, got {lam}")
    for value in (cl, distill):
        v = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss component {v}")
    if lam == 0:
        return cl
    if isinstance(cl, Tensor) or isinstance(distill, Tensor):
        return nm.add(cl, nm.scale(distill, lam))
    return float(cl) + lam * float(distill)


def row_entropy(teacher: np.ndarray, tau_t: float = DEFAULT_TAU_T) -> np.ndarray:
    """Entropy of each teacher row distribution (over j != i)."""
    q = teacher_distribution(teacher, tau_t)
    with np.errstate(divide="ignore"):
        logs = np.where(q > 0, np.log(np.where(q > 0, q, 1.0)), 0.0)
    return -(q * logs).sum(axis=1)
