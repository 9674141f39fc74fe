"""Toy bag-of-words sentence encoder.

mean-pooled token embeddings -> dropout -> tanh hidden layer -> dropout ->
linear projection head -> l2 row normalization. Evaluation mode runs without
dropout and stops at the (normalized) hidden layer.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from . import numeric as nm
from .errors import InputError, ParameterError, ShapeError
from .numeric import Tensor
from .rng import derive_seed, stream

PARAM_NAMES = ("token_embedding", "hidden_weight", "hidden_bias", "head_weight", "head_bias")
DEFAULT_DIMS = (32, 64, 32)
DEFAULT_DROPOUT = 0.1
MAX_SEQ_LEN = 32


@dataclass
class EncoderParams:
    token_embedding: np.ndarray
    hidden_weight: np.ndarray
    hidden_bias: np.ndarray
    head_weight: np.ndarray
    head_bias: np.ndarray
    dropout: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        v, d_tok = self.token_embedding.shape
        d_h = self.hidden_weight.shape[1]
        d = self.head_weight.shape[1]
        expected = {
            "hidden_weight": (d_tok, d_h),
            "hidden_bias": (1, d_h),
            "head_weight": (d_h, d),
            "head_bias": (1, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def vocab(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.token_embedding.shape[1], self.hidden_weight.shape[1], self.head_weight.shape[1])

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_NAMES]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> "EncoderParams":
        return EncoderParams(*[np.array(a, dtype=np.float64, copy=True) for a in arrays], dropout=self.dropout)

    def copy(self) -> "EncoderParams":
        return self.with_arrays(self.arrays())

    def equals(self, other: "EncoderParams") -> bool:
        return self.dropout == other.dropout and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass(frozen=True)
class SentenceBatch:
    sentences: tuple[tuple[int, ...], ...]
    _pooling: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def of(cls, sentences) -> "SentenceBatch":
        return cls(tuple(tuple(int(t) for t in s) for s in sentences))

    def __len__(self):
        return len(self.sentences)

    def pooling_matrix(self, vocab: int) -> sparse.csr_matrix:
        """N x V matrix whose product with the embedding table mean-pools each sentence."""
        cached = self._pooling.get(vocab)
        if cached is not None:
            return cached
        lengths = np.array([len(s) for s in self.sentences])
        if lengths.size and lengths.min() == 0:
            raise InputError(f"sentence {int(np.argmin(lengths))} is empty")
        tokens = np.fromiter((t for s in self.sentences for t in s), dtype=np.int64, count=int(lengths.sum()))
        bad = np.flatnonzero((tokens < 0) | (tokens >= vocab))
        if bad.size:
            ends = np.cumsum(lengths)
            i = int(np.searchsorted(ends, bad[0], side="right"))
            pos = int(bad[0] - (ends[i] - lengths[i]))
            raise InputError(f"token id {tokens[bad[0]]} at sentence {i}, position {pos} is outside [0, {vocab})")
        rows = np.repeat(np.arange(len(lengths)), lengths)
        # duplicates are summed on conversion, giving count / length per entry
        pool = sparse.coo_matrix((1.0 / lengths[rows], (rows, tokens)), shape=(len(lengths), vocab)).tocsr()
        self._pooling[vocab] = pool
        return pool


@dataclass
class EmbeddingBatch:
    view: Tensor
    dropout_seed: int | None = None

    @property
    def values(self) -> np.ndarray:
        return self.view.value


def init_params(vocab: int, dims=DEFAULT_DIMS, dropout: float = DEFAULT_DROPOUT, seed: int = 0) -> EncoderParams:
    d_tok, d_h, d = dims
    if min(vocab, d_tok, d_h, d) < 1:
        raise ParameterError(f"vocab and dims must be >= 1, got {vocab}, {dims}")
    if not 0.0 <= dropout < 1.0:
        raise ParameterError(f"dropout must lie in [0, 1), got {dropout}")
    # fan-in of each layer; the token table counts as a D_tok-wide layer
    shapes = {
        "token_embedding": ((vocab, d_tok), d_tok),
        "hidden_weight": ((d_tok, d_h), d_tok),
        "hidden_bias": ((1, d_h), d_tok),
        "head_weight": ((d_h, d), d_h),
        "head_bias": ((1, d), d_h),
    }
    arrays = []
    for name in PARAM_NAMES:
        shape, fan_in = shapes[name]
        bound = 1.0 / math.sqrt(fan_in)
        arrays.append(stream(seed, "init", name).uniform(-bound, bound, size=shape))
    return EncoderParams(*arrays, dropout=dropout)


def param_leaves(params: EncoderParams) -> list[Tensor]:
    """Fresh gradient-tracking leaves for every parameter matrix."""
    return [Tensor(a, requires_grad=True) for a in params.arrays()]


def encode(
    params: EncoderParams,
    batch: SentenceBatch,
    dropout_seed: int = 0,
    train_mode: bool = True,
    *,
    use_head: bool | None = None,
    leaves: Sequence[Tensor] | None = None,
) -> EmbeddingBatch:
    """Embed a batch. ``leaves`` lets a caller differentiate through the pass.

    ``use_head`` defaults to ``train_mode``; the distillation logit pass sets it
    explicitly to run the full training network without dropout.
    """
    if use_head is None:
        use_head = train_mode
    emb, w1, b1, w2, b2 = leaves if leaves is not None else [Tensor(a) for a in params.arrays()]
    pool = batch.pooling_matrix(params.vocab)
    rate = params.dropout if train_mode else 0.0
    rng = stream(dropout_seed, "dropout") if rate > 0 else None

    x = nm.sparse_matmul(pool, emb)
    if rng is not None:
        x = nm.dropout_apply(x, rng.random(x.shape) >= rate, rate)
    x = nm.tanh(nm.add(nm.matmul(x, w1), b1))
    if use_head:
        if rng is not None:
            x = nm.dropout_apply(x, rng.random(x.shape) >= rate, rate)
        x = nm.add(nm.matmul(x, w2), b2)
    return EmbeddingBatch(nm.l2_normalize_rows(x), dropout_seed if rate > 0 else None)


def encode_pair(params: EncoderParams, batch: SentenceBatch, seed: int, *, leaves=None):
    """Two dropout views of the same batch; the second supplies the positives."""
    first = encode(params, batch, derive_seed(seed, "view", 0), True, leaves=leaves)
    second = encode(params, batch, derive_seed(seed, "view", 1), True, leaves=leaves)
    return first, second


def logit_embeddings(params: EncoderParams, batch: SentenceBatch) -> np.ndarray:
    """Deterministic full-network embeddings (head on, dropout off) used for distillation logits."""
    return encode(params, batch, train_mode=False, use_head=True).values


def eval_embeddings(params: EncoderParams, batch: SentenceBatch) -> np.ndarray:
    return encode(params, batch, train_mode=False).values


CHECKPOINT_MAGIC = "DLAB-CHECKPOINT 1"


def checkpoint_bytes(params: EncoderParams, meta: dict | None = None) -> bytes:
    lines = [CHECKPOINT_MAGIC, f"dropout={params.dropout!r}", f"vocab={params.vocab}",
             "dims=" + ",".join(str(d) for d in params.dims)]
    for key, value in (meta or {}).items():
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    for name in PARAM_NAMES:
        rows, cols = getattr(params, name).shape
        lines.append(f"tensor {name} {rows} {cols}")
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("utf-8"))
    for a in params.arrays():
        nm.write_matrix(buf, a)
    return buf.getvalue()


def save_checkpoint(path, params: EncoderParams, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def load_checkpoint(path) -> tuple[EncoderParams, dict]:
    """Returns the parameters and the remaining manifest fields as strings."""
    with open(path, "rb") as f:
        if f.readline().decode("utf-8").strip() != CHECKPOINT_MAGIC:
            raise InputError(f"{path} is not a dlab checkpoint")
        meta: dict[str, str] = {}
        order = []
        while True:
            line = f.readline().decode("utf-8").strip()
            if not line:
                raise InputError(f"{path}: manifest ended early")
            if line == "end":
                break
            if line.startswith("tensor "):
                _, name, rows, cols = line.split()
                order.append((name, (int(rows), int(cols))))
            else:
                key, _, value = line.partition("=")
                meta[key] = value
        arrays = {}
        for name, shape in order:
            m = nm.read_matrix(f)
            if m.shape != shape:
                raise ShapeError(f"{path}: {name} stored as {m.shape}, manifest says {shape}")
            arrays[name] = m
    missing = [n for n in PARAM_NAMES if n not in arrays]
    if missing:
        raise InputError(f"{path}: missing tensors {missing}")
    dropout = float(meta.pop("dropout"))
    meta.pop("vocab", None)
    meta.pop("dims", None)
    return EncoderParams(*[arrays[n] for n in PARAM_NAMES], dropout=dropout), meta
