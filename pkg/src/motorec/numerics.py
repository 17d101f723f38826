"""Dense/sparse 2-D linear algebra with reverse-mode differentiation and Adam.

Every value is a 2-D float64 array. ``Tensor`` wraps one such array and records
how it was produced; ``backward`` walks the recorded graph from a 1x1 root and
accumulates gradients into every node that requires them.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, DimensionError, TrainingError

__all__ = [
    "Tensor",
    "SparseMatrix",
    "AdamState",
    "parameter",
    "constant",
    "backward",
    "spmm",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "transpose",
    "gather_rows",
    "concat_cols",
    "concat_rows",
    "slice_rows",
    "slice_cols",
    "total_sum",
    "mean",
    "sum_rows",
    "sum_cols",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "softplus",
    "square",
    "sqrt",
    "clip",
    "stop_gradient",
    "frozen_stop_gradients",
    "logsumexp_rows",
    "softmax_rows",
    "normalize_rows",
    "squared_distances",
    "straight_through",
    "adam_update",
    "finite_difference_grad",
]


def _as2d(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {arr.shape}")
    return arr


class Tensor:
    """A node in the differentiation graph holding a 2-D float64 value."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(
        self,
        value,
        parents: tuple[Tensor, ...] = (),
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.value = _as2d(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = parents
        self._backward = backward_fn
        self._consumed = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value: np.ndarray, parents: Sequence[Tensor], fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, tuple(parents), fn if needs else None, requires_grad=needs)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.value - b.value, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), fn)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    out = a.value / b.value

    def fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.value, b.shape))

    return _node(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def fn(g):
        a._accumulate(g * c)

    return _node(a.value * c, (a,), fn)


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _node(a.value @ b.value, (a, b), fn)


def transpose(a: Tensor) -> Tensor:
    def fn(g):
        a._accumulate(g.T)

    return _node(np.ascontiguousarray(a.value.T), (a,), fn)


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Compressed-row storage. Treated as a constant by the differentiation graph."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        data = np.asarray(self.data, dtype=np.float64)
        if indptr.shape != (self.rows + 1,) or indptr[0] != 0:
            raise DimensionError("row offsets must have rows+1 entries starting at 0")
        if np.any(np.diff(indptr) < 0) or indptr[-1] != len(indices) or len(indices) != len(data):
            raise DimensionError("row offsets must be nondecreasing and end at the nonzero count")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.cols):
            raise DimensionError("column index out of bounds")
        for r in range(self.rows):
            seg = indices[indptr[r] : indptr[r + 1]]
            if len(seg) > 1 and np.any(np.diff(seg) <= 0):
                raise DimensionError(f"column indices in row {r} not strictly increasing")
        if not np.all(np.isfinite(data)):
            raise DimensionError("sparse values must be finite")
        for name, arr in (("indptr", indptr), ("indices", indices), ("data", data)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        csr = sp.csr_matrix((data, indices, indptr), shape=(self.rows, self.cols))
        object.__setattr__(self, "_csr", csr)
        object.__setattr__(self, "_csr_t", csr.T.tocsr())

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return len(self.data)

    @classmethod
    def from_scipy(cls, m) -> SparseMatrix:
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr.copy(), m.indices.copy(), m.data.copy())

    @classmethod
    def from_dense(cls, dense) -> SparseMatrix:
        return cls.from_scipy(sp.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @classmethod
    def identity(cls, n: int) -> SparseMatrix:
        return cls.from_scipy(sp.identity(n, format="csr"))

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def dot(self, dense: np.ndarray) -> np.ndarray:
        return np.asarray(self._csr @ dense)

    def rdot(self, dense: np.ndarray) -> np.ndarray:
        """Computes ``self.T @ dense``."""
        return np.asarray(self._csr_t @ dense)


def spmm(a: SparseMatrix, b: Tensor) -> Tensor:
    b = _lift(b)
    if a.cols != b.shape[0]:
        raise DimensionError(f"spmm: sparse {a.shape} @ dense {b.shape}")

    def fn(g):
        b._accumulate(a.rdot(g))

    return _node(a.dot(b.value), (b,), fn)


# -- indexing and reshaping -------------------------------------------------


def gather_rows(a: Tensor, index) -> Tensor:
    index = np.asarray(index, dtype=np.int64).ravel()
    if len(index) and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ContractError(f"row index out of range for {a.shape[0]} rows")

    def fn(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return _node(a.value[index], (a,), fn)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    if len({p.shape[0] for p in parts}) != 1:
        raise DimensionError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def fn(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _node(np.concatenate([p.value for p in parts], axis=1), parts, fn)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    if len({p.shape[1] for p in parts}) != 1:
        raise DimensionError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def fn(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi])

    return _node(np.concatenate([p.value for p in parts], axis=0), parts, fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def fn(g):
        full = np.zeros_like(a.value)
        full[start:stop] = g
        a._accumulate(full)

    return _node(a.value[start:stop], (a,), fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def fn(g):
        full = np.zeros_like(a.value)
        full[:, start:stop] = g
        a._accumulate(full)

    return _node(a.value[:, start:stop], (a,), fn)


# -- reductions -------------------------------------------------------------


def total_sum(a: Tensor) -> Tensor:
    def fn(g):
        a._accumulate(np.full(a.shape, g[0, 0]))

    return _node(np.array([[a.value.sum()]]), (a,), fn)


def mean(a: Tensor) -> Tensor:
    return scale(total_sum(a), 1.0 / a.value.size)


def sum_rows(a: Tensor) -> Tensor:
    """Sum across columns, one value per row: (n, d) -> (n, 1)."""

    def fn(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(a.value.sum(axis=1, keepdims=True), (a,), fn)


def sum_cols(a: Tensor) -> Tensor:
    """Sum down rows, one value per column: (n, d) -> (1, d)."""

    def fn(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _node(a.value.sum(axis=0, keepdims=True), (a,), fn)


# -- pointwise nonlinearities -----------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)

    def fn(g):
        a._accumulate(g * out)

    return _node(out, (a,), fn)


def log(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise ContractError("log of a non-positive value")

    def fn(g):
        a._accumulate(g / a.value)

    return _node(np.log(a.value), (a,), fn)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)

    def fn(g):
        a._accumulate(g * (1.0 - out * out))

    return _node(out, (a,), fn)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.value)

    def fn(g):
        a._accumulate(g * out * (1.0 - out))

    return _node(out, (a,), fn)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x) without overflow."""
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def fn(g):
        a._accumulate(g * _stable_sigmoid(x))

    return _node(out, (a,), fn)


def square(a: Tensor) -> Tensor:
    def fn(g):
        a._accumulate(2.0 * g * a.value)

    return _node(a.value * a.value, (a,), fn)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.value <= 0):
        raise ContractError("sqrt needs strictly positive input to stay differentiable")
    out = np.sqrt(a.value)

    def fn(g):
        a._accumulate(g * 0.5 / out)

    return _node(out, (a,), fn)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.value >= lo) & (a.value <= hi)

    def fn(g):
        a._accumulate(g * inside)

    return _node(np.clip(a.value, lo, hi), (a,), fn)


class StopGradientTape:
    """Records stop-gradient values on a first pass and replays them afterwards.

    Used by gradient checks: the straight-through estimator is the exact derivative
    of the surrogate in which every ``sg(.)`` value is held fixed, so finite
    differences must be taken with those values frozen.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.replaying = False
        self.pos = 0

    def replay(self) -> None:
        self.replaying = True
        self.pos = 0

    def __call__(self, value: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.values.append(value.copy())
            return value
        if self.pos >= len(self.values) or self.values[self.pos].shape != value.shape:
            raise ContractError("stop-gradient replay diverged from the recorded graph")
        out = self.values[self.pos]
        self.pos += 1
        return out


_SG_TAPE: StopGradientTape | None = None


@contextmanager
def frozen_stop_gradients():
    global _SG_TAPE
    tape, prev = StopGradientTape(), _SG_TAPE
    _SG_TAPE = tape
    try:
        yield tape
    finally:
        _SG_TAPE = prev


def stop_gradient(a: Tensor) -> Tensor:
    value = a.value if _SG_TAPE is None else _SG_TAPE(a.value)
    return Tensor(value)


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    """Forward value ``z_q``; the backward pass copies the incoming gradient
    unchanged to both ``z_e`` and ``z_q``."""
    if z_e.shape != z_q.shape:
        raise DimensionError(f"straight_through: {z_e.shape} vs {z_q.shape}")
    return add(z_q, sub(z_e, stop_gradient(z_e)))


def logsumexp_rows(a: Tensor) -> Tensor:
    """Row-wise log-sum-exp with max subtraction: (n, d) -> (n, 1)."""
    m = a.value.max(axis=1, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=1, keepdims=True)
    soft = e / s

    def fn(g):
        a._accumulate(g * soft)

    return _node(m + np.log(s), (a,), fn)


def softmax_rows(a: Tensor) -> Tensor:
    return exp(sub(a, logsumexp_rows(a)))


def normalize_rows(a: Tensor) -> Tensor:
    norms_sq = (a.value * a.value).sum(axis=1)
    if np.any(norms_sq == 0):
        raise ContractError("cannot normalise a zero-norm row")
    return div(a, sqrt(sum_rows(square(a))))


def squared_distances(x: Tensor, c: Tensor) -> Tensor:
    """Pairwise ``||x_i - c_j||^2`` as an (n, K) tensor."""
    if x.shape[1] != c.shape[1]:
        raise DimensionError(f"squared_distances: dims {x.shape[1]} vs {c.shape[1]}")
    xx = sum_rows(square(x))
    cc = transpose(sum_rows(square(c)))
    return add(sub(xx, scale(matmul(x, transpose(c)), 2.0)), cc)


# -- backward pass ----------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Accumulate d(root)/d(node) into every reachable node that requires grad.

    Returns the gradients of the named leaves. A root may be differentiated once.
    """
    if root.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got {root.shape}")
    if root._consumed:
        raise ContractError("backward already ran from this root; rebuild the graph first")
    root._consumed = True
    if not root.requires_grad:
        return {}
    order = _topological_order(root)
    root._accumulate(np.ones((1, 1)))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    grads = {}
    for node in order:
        if node.name is not None and not node._parents:
            grads[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return grads


# -- optimiser --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(state: AdamState, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam step, applied in place to ``params[name].value``."""
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.setdefault(name, np.zeros_like(p.value))
        v = state.v.setdefault(name, np.zeros_like(p.value))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- finite differences (test oracle) ----------------------------------------


def finite_difference_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to every entry of ``arr``.

    ``arr`` is perturbed in place and restored.
    """
    out = np.zeros_like(arr)
    for idx in np.ndindex(*arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
    return out
