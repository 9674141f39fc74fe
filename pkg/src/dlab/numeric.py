"""Dense float64 matrices with a small reverse-mode autodiff graph.

Every value is a 2-D ``numpy.float64`` array. Differentiable operations take
``Tensor`` (or plain arrays, wrapped as constants) and return a ``Tensor``
that remembers its parents and how to push adjoints back to them.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateEmbeddingError, NumericError, ParameterError, ShapeError

EPS_NORM = 1e-12

OP_KINDS = (
    "input",
    "matmul",
    "transpose",
    "row-normalize",
    "softmax",
    "log-softmax",
    "log",
    "sum",
    "scale",
    "add",
    "mul",
    "elementwise-nonlinearity",
    "dropout-mask-apply",
)


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {np.shape(x)}")
    return m


class Tensor:
    """A node of the compute graph: a matrix value plus its adjoint."""

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward")

    def __init__(self, value, parents: Sequence["Tensor"] = (), op: str = "input", requires_grad: bool = False):
        self.value = as_matrix(value)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self._backward: Callable[[], None] = lambda: None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value produced by {op}")
    return Tensor(value, parents, op)


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = _node(a.value @ b.value, (a, b), "matmul")

    def backward():
        _accumulate(a, out.grad @ b.value.T)
        _accumulate(b, a.value.T @ out.grad)

    out._backward = backward
    return out


def sparse_matmul(const, b) -> Tensor:
    """``const @ b`` for a constant scipy.sparse left operand (e.g. a pooling matrix)."""
    b = _t(b)
    if const.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {const.shape[0]}x{const.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = _node(np.asarray(const @ b.value), (b,), "matmul")

    def backward():
        _accumulate(b, np.asarray(const.T @ out.grad))

    out._backward = backward
    return out


def transpose(a) -> Tensor:
    a = _t(a)
    out = _node(a.value.T.copy(), (a,), "transpose")

    def backward():
        _accumulate(a, out.grad.T)

    out._backward = backward
    return out


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1xC row broadcast over the rows of ``a``."""
    a, b = _t(a), _t(b)
    row_broadcast = b.shape[0] == 1 and a.shape[0] != 1 and b.shape[1] == a.shape[1]
    if a.shape != b.shape and not row_broadcast:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    out = _node(a.value + b.value, (a, b), "add")

    def backward():
        _accumulate(a, out.grad)
        _accumulate(b, out.grad.sum(axis=0, keepdims=True) if row_broadcast else out.grad)

    out._backward = backward
    return out


def scale(a, c: float) -> Tensor:
    a = _t(a)
    c = float(c)
    out = _node(a.value * c, (a,), "scale")

    def backward():
        _accumulate(a, out.grad * c)

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"elementwise product of {a.shape} and {b.shape}")
    out = _node(a.value * b.value, (a, b), "mul")

    def backward():
        _accumulate(a, out.grad * b.value)
        _accumulate(b, out.grad * a.value)

    out._backward = backward
    return out


def tanh(a) -> Tensor:
    a = _t(a)
    y = np.tanh(a.value)
    out = _node(y, (a,), "elementwise-nonlinearity")

    def backward():
        _accumulate(a, out.grad * (1.0 - y * y))

    out._backward = backward
    return out


def log(a) -> Tensor:
    a = _t(a)
    if np.any(a.value <= 0):
        raise NumericError("log of a non-positive entry")
    out = _node(np.log(a.value), (a,), "log")

    def backward():
        _accumulate(a, out.grad / a.value)

    out._backward = backward
    return out


def total(a) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    a = _t(a)
    out = _node(np.array([[a.value.sum()]]), (a,), "sum")

    def backward():
        _accumulate(a, np.full(a.shape, out.grad[0, 0]))

    out._backward = backward
    return out


def dropout_apply(a, keep: np.ndarray, rate: float) -> Tensor:
    """Multiply by a 0/1 keep mask, rescaled by ``1 / (1 - rate)``."""
    a = _t(a)
    if keep.shape != a.shape:
        raise ShapeError(f"dropout mask {keep.shape} does not match {a.shape}")
    factor = np.asarray(keep, dtype=np.float64) / (1.0 - rate)
    out = _node(a.value * factor, (a,), "dropout-mask-apply")

    def backward():
        _accumulate(a, out.grad * factor)

    out._backward = backward
    return out


def l2_normalize_rows(m) -> Tensor:
    m = _t(m)
    norms = np.sqrt(np.sum(m.value * m.value, axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] <= EPS_NORM)
    if bad.size:
        raise DegenerateEmbeddingError(int(bad[0]), float(norms[bad[0], 0]))
    y = m.value / norms
    out = _node(y, (m,), "row-normalize")

    def backward():
        g = out.grad
        _accumulate(m, (g - y * np.sum(g * y, axis=1, keepdims=True)) / norms)

    out._backward = backward
    return out


def _check_temperature(temperature: float) -> float:
    temperature = float(temperature)
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    return temperature


def _masked_scaled(x: np.ndarray, temperature: float, mask: np.ndarray | None) -> np.ndarray:
    z = x / temperature
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    return z - z.max(axis=1, keepdims=True)


def softmax_rows(a, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax of ``a / temperature``; entries where ``mask`` is False get probability 0."""
    a = _t(a)
    temperature = _check_temperature(temperature)
    if mask is not None and not np.all(mask.any(axis=1)):
        raise ParameterError("softmax mask leaves a row empty")
    e = np.exp(_masked_scaled(a.value, temperature, mask))
    p = e / e.sum(axis=1, keepdims=True)
    out = _node(p, (a,), "softmax")

    def backward():
        g = out.grad
        _accumulate(a, p * (g - np.sum(g * p, axis=1, keepdims=True)) / temperature)

    out._backward = backward
    return out


def log_softmax_rows(a, temperature: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Row log-softmax of ``a / temperature``; masked-out entries are reported as 0 and get no gradient."""
    a = _t(a)
    temperature = _check_temperature(temperature)
    if mask is not None and not np.all(mask.any(axis=1)):
        raise ParameterError("softmax mask leaves a row empty")
    z = _masked_scaled(a.value, temperature, mask)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    if mask is not None:
        y = np.where(mask, y, 0.0)
    out = _node(y, (a,), "log-softmax")

    def backward():
        g = out.grad if mask is None else np.where(mask, out.grad, 0.0)
        _accumulate(a, (g - p * g.sum(axis=1, keepdims=True)) / temperature)

    out._backward = backward
    return out


def softmax_row(v, temperature: float = 1.0) -> np.ndarray:
    """Softmax of a 1-D sequence, with max-subtraction."""
    temperature = _check_temperature(temperature)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError("softmax_row needs a non-empty 1-D sequence")
    if not np.all(np.isfinite(v)):
        raise NumericError("softmax_row input contains non-finite values")
    e = np.exp((v - v.max()) / temperature)
    return e / e.sum()


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    state[id(root)] = 1
    while stack:
        node, i = stack.pop()
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            s = state.get(id(parent))
            if s == 1:
                raise ContractError(f"compute graph has a cycle through a {parent.op} node")
            if s is None:
                state[id(parent)] = 1
                stack.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Returns a map from every reachable leaf that requires a gradient to its
    adjoint. Leaves never touched by the root's value get a zero adjoint.
    """
    if not isinstance(root, Tensor) or root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got {getattr(root, 'shape', type(root))}")
    order = _topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones((1, 1))
    for node in reversed(order):
        if node.grad is not None and node.requires_grad:
            node._backward()
    grads = {}
    for node in order:
        if node.op == "input" and node.requires_grad:
            grads[node] = node.grad if node.grad is not None else np.zeros(node.shape)
    return grads


def _scalar(value) -> float:
    v = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(v):
        raise NumericError(f"objective returned non-finite value {v}")
    return v


def analytic_gradient(objective: Callable[[list[Tensor]], Tensor], params: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.array(p, dtype=np.float64, copy=True), requires_grad=True) for p in params]
    out = objective(leaves)
    _scalar(out)
    grads = backward(out)
    return [grads.get(leaf, np.zeros(leaf.shape)) for leaf in leaves]


def finite_diff_check(
    objective: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    step: float = 1e-6,
    grad_fn: Callable[[list[np.ndarray]], list[np.ndarray]] | None = None,
) -> float:
    """Largest relative disagreement between the analytic gradient and central differences.

    ``objective`` maps a list of tensors (one per parameter matrix) to a scalar
    tensor. ``grad_fn`` overrides the analytic gradient, which otherwise comes
    from :func:`backward`.
    """
    if not step > 0:
        raise ParameterError(f"finite-difference step must be positive, got {step}")
    params = [as_matrix(p).copy() for p in params]
    analytic = grad_fn(params) if grad_fn is not None else analytic_gradient(objective, params)

    def evaluate() -> float:
        return _scalar(objective([Tensor(p) for p in params]))

    worst = 0.0
    for p, g in zip(params, analytic):
        g = as_matrix(g)
        for idx in np.ndindex(*p.shape):
            orig = p[idx]
            p[idx] = orig + step
            f_plus = evaluate()
            p[idx] = orig - step
            f_minus = evaluate()
            p[idx] = orig
            central = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(g[idx]), abs(central), 1e-12)
            worst = max(worst, abs(g[idx] - central) / denom)
    return worst


MAGIC = b"DLAB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def matrix_to_bytes(m) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    return _HEADER.pack(MAGIC, FORMAT_VERSION, rows, cols) + np.ascontiguousarray(m, dtype="<f8").tobytes()


def read_matrix(f: BinaryIO) -> np.ndarray:
    header = f.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise ShapeError("truncated matrix header")
    magic, version, rows, cols = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ShapeError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ShapeError(f"unsupported matrix format version {version}")
    payload = f.read(8 * rows * cols)
    if len(payload) != 8 * rows * cols:
        raise ShapeError("truncated matrix payload")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)


def write_matrix(f: BinaryIO, m) -> None:
    f.write(matrix_to_bytes(m))
