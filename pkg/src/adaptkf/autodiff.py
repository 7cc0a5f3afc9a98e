"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every value is a ``Tensor`` holding a read-only ``(rows, cols)`` numpy array.
Operations on tensors that require gradients record their parents and a
backward rule; :func:`backward` orders the recorded graph topologically into a
:class:`GraphTape` and replays the rules in reverse.

Only scalar (1x1) broadcasting is supported, plus the explicit row-bias op
:func:`add_bias` used by batched affine layers.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import lapack

from .errors import ContractViolation, DimensionError, SingularMatrixError

DTYPE = np.float64

JITTER_START = 1e-9
JITTER_MAX = 1e-3
SOFTPLUS_LINEAR_ABOVE = 30.0

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def enable_grad():
    """Re-enable graph recording inside a ``no_grad`` block."""
    prev = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D; got array of shape {arr.shape}")
        self.data = _freeze(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _freeze(arr)
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def set_data(self, arr: np.ndarray) -> None:
        """Rebind the stored values (used by optimizers between graph recordings)."""
        arr = np.array(arr, dtype=DTYPE)
        if arr.shape != self.data.shape:
            raise DimensionError(f"cannot rebind {self.shape} tensor to {arr.shape}")
        self.data = _freeze(arr)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data.tolist()}{flag})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(arr: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(arr)
    if is_grad_enabled():
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._backward = backward_fn
                break
    return out


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), back)


def _check_binary(opname: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != (1, 1) and b.shape != (1, 1):
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("sub", a, b)
    sa, sb = a.shape, b.shape

    def back(g):
        return _reduce_to(g, sa), _reduce_to(-g, sb)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def back(g):
        return _reduce_to(g * bd, sa), _reduce_to(g * ad, sb)

    return _result(ad * bd, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        return (g * c,)

    return _result(a.data * c, (a,), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def back(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), back)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    big = x > SOFTPLUS_LINEAR_ABOVE
    safe = np.where(big, 0.0, x)
    y = np.where(big, x, np.log1p(np.exp(safe)))
    # d/dx log(1+e^x) = sigmoid(x)
    deriv = _stable_sigmoid(x)

    def back(g):
        return (g * deriv,)

    return _result(y, (a,), back)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def back(g):
        return (g * y,)

    return _result(y, (a,), back)


def log(a: Tensor) -> Tensor:
    x = a.data

    def back(g):
        return (g / x,)

    return _result(np.log(x), (a,), back)


def square(a: Tensor) -> Tensor:
    x = a.data

    def back(g):
        return (2.0 * g * x,)

    return _result(x * x, (a,), back)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "tanh": tanh,
    "softplus": softplus,
    "exp": exp,
    "square": square,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def transpose(a: Tensor) -> Tensor:
    def back(g):
        return (g.T,)

    return _result(np.ascontiguousarray(a.data.T), (a,), back)


def symmetrize(a: Tensor) -> Tensor:
    """(A + A^T) / 2"""
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"symmetrize needs a square matrix, got {a.shape}")

    def back(g):
        return (0.5 * (g + g.T),)

    return _result(0.5 * (a.data + a.data.T), (a,), back)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def back(g):
        return (np.full(shape, g[0, 0]),)

    return _result(np.array([[a.data.sum()]]), (a,), back)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.data.size)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add the 1 x n row ``b`` to every row of the m x n matrix ``x``."""
    if b.shape[0] != 1 or b.shape[1] != x.shape[1]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit rows of {x.shape}")

    def back(g):
        return g, g.sum(axis=0, keepdims=True)

    return _result(x.data + b.data, (x, b), back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _result(a.data[:, start:stop].copy(), (a,), back)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _result(a.data[start:stop].copy(), (a,), back)


def row(a: Tensor, i: int) -> Tensor:
    return slice_rows(a, i, i + 1)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: column counts differ {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), back)


def diag(v: Tensor) -> Tensor:
    """Embed a 1 x n row as an n x n diagonal matrix."""
    if v.shape[0] != 1:
        raise DimensionError(f"diag expects a row vector, got {v.shape}")

    def back(g):
        return (np.diagonal(g).reshape(1, -1).copy(),)

    return _result(np.diag(v.data[0]), (v,), back)


def _pivots(a: np.ndarray) -> list[float]:
    """Run an unblocked Cholesky and return the pivots up to the first failure."""
    n = a.shape[0]
    L = np.zeros_like(a)
    out = []
    for j in range(n):
        piv = a[j, j] - L[j, :j] @ L[j, :j]
        out.append(float(piv))
        if not piv > 0:
            break
        L[j, j] = np.sqrt(piv)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return out


def cholesky_inverse(a: np.ndarray) -> np.ndarray:
    """Invert a symmetric positive definite matrix via Cholesky.

    A plain factorization is tried first; on failure jitter ``eps*I`` is added
    starting at ``JITTER_START`` and multiplied by 10 up to ``JITTER_MAX``.
    """
    n = a.shape[0]
    eye = np.eye(n)
    eps = 0.0
    while True:
        c, info = lapack.dpotrf(a + eps * eye if eps else a, lower=1, clean=1)
        if info == 0 and np.all(np.isfinite(c)):
            inv, info = lapack.dpotri(c, lower=1)
            if info == 0:
                low = np.tril(inv)
                return low + np.tril(inv, -1).T
        if eps == 0.0:
            eps = JITTER_START
        elif eps * 10 <= JITTER_MAX * (1 + 1e-12):
            eps *= 10
        else:
            break
    piv = _pivots(0.5 * (a + a.T)) if np.all(np.isfinite(a)) else [float("nan")]
    min_piv = min(piv)
    raise SingularMatrixError(
        f"Cholesky failed for {n}x{n} matrix after jitter up to {JITTER_MAX:g}; "
        f"smallest pivot {min_piv:.3e}",
        min_piv,
    )


def mat_inverse(a: Tensor) -> Tensor:
    """Inverse of the symmetric part of ``a`` (inputs here are covariances)."""
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"mat_inverse needs a square matrix, got {a.shape}")
    # Only the symmetric part is inverted, so the gradient is symmetrized to match.
    inv = cholesky_inverse(0.5 * (a.data + a.data.T))

    def back(g):
        # d(A^-1) = -A^-1 dA A^-1
        m = -(inv @ g @ inv)
        return (0.5 * (m + m.T),)

    return _result(inv, (a,), back)


# ---------------------------------------------------------------- backward


class GraphTape:
    """Topologically ordered record of the operations behind one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def record(cls, output: Tensor) -> "GraphTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
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
        return cls(order)

    def replay(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if not p.requires_grad or pg is None:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Gradients accumulate across calls until zeroed.
    """
    if loss.shape != (1, 1):
        raise ContractViolation(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss does not depend on any tensor that requires grad")
    GraphTape.record(loss).replay(np.ones((1, 1)))


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
