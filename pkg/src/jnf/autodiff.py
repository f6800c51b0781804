"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations only record onto a gradient tape when a :class:`Tape` is active
*and* at least one input requires a gradient.  Outside a tape every operation
is plain numpy, which is how frozen models are evaluated.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "DomainError", "tensor", "constant", "parameter",
    "matmul", "add", "sub", "mul", "div", "scale", "add_scalar", "sum", "mean",
    "exp", "log", "sqrt", "square", "tanh", "relu", "sigmoid", "softplus", "negate",
    "concat", "slice_cols", "take_rows", "transpose", "broadcast_to", "clip",
    "logsumexp", "sym_matrix_power", "clamped_nuclear_norm", "permute_cols", "backward",
]


class ShapeError(ValueError):
    """Input shapes do not satisfy an operation's shape rule."""


class DomainError(ValueError):
    """Input lies outside an operation's mathematical domain."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally a node on the active tape."""

    __slots__ = ("data", "requires_grad", "name", "node", "_parents", "_vjp")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return negate(self)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; one tape per optimisation step, then discard.
    Nodes are appended in creation order, so parents always precede children.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        out.requires_grad = True
        out.node = len(self.nodes)
        out._parents = parents
        out._vjp = vjp
        self.nodes.append(out)

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``loss`` with respect to each tensor in ``sources``."""
        grads = self.backward(loss)
        return [grads.get(s, np.zeros_like(s.data)) for s in sources]

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[Tensor, np.ndarray] = {}
        if loss.node is None or loss.node >= len(self.nodes) or self.nodes[loss.node] is not loss:
            return grads
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes[: loss.node + 1]):
            g = acc.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in acc:
                    acc[key] = acc[key] + pg
                else:
                    acc[key] = pg
                if parent._vjp is None:
                    leaves[key] = parent
        for key, leaf in leaves.items():
            grads[leaf] = acc[key]
        return grads


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Leaf gradients of a scalar loss recorded on the active tape."""
    tape = _active_tape()
    if tape is None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        return {}
    return tape.backward(loss)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape._record(out, parents, vjp)
    return out


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    """Elementwise sum; a (batch, feature) operand may take a (feature,) bias."""
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product, same broadcasting rule as :func:`add`."""
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _binary_shapes(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, sa), _unbroadcast(-g * out / bd, sb)))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c: float) -> Tensor:
    a = _wrap(a)
    return _make(a.data + float(c), (a,), lambda g: (g,))


def negate(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; zero gradient where clamping is active."""
    a = _wrap(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    out = a.data.sum(axis=axis)
    return _make(out, (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def logsumexp(a, axis: int = 1) -> Tensor:
    """Stable log(sum(exp(a), axis)) for 2-d input."""
    a = _wrap(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


# ---------------------------------------------------------------- structure

def matmul(a, b) -> Tensor:
    """(n, k) @ (k, m) -> (n, m); 1-d right operands are treated as columns."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 1:
        return _make(ad @ bd, (a, b), lambda g: (np.outer(g, bd), ad.T @ g))
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def concat(tensors: Iterable, axis: int = 1) -> Tensor:
    ts = tuple(_wrap(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of nothing")
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {err}") from None
    cuts = np.cumsum(sizes)[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_cols(a, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-d tensor (or elements of a 1-d one)."""
    a = _wrap(a)
    if not 0 <= start <= stop <= a.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for {a.shape}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop].copy(), (a,), vjp)


def take_rows(a, index) -> Tensor:
    a = _wrap(a)
    index = np.asarray(index)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), vjp)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    """Explicit broadcast: (f,) -> (n, f), (n, 1) -> (n, f) or () -> any shape."""
    a = _wrap(a)
    src = a.shape
    ok = (src == () or (len(src) == 1 and len(shape) == 2 and src[0] == shape[1])
          or (len(src) == 2 and len(shape) == 2 and src[1] == 1 and src[0] == shape[0])
          or src == tuple(shape))
    if not ok:
        raise ShapeError(f"cannot broadcast {src} to {shape}")

    def vjp(g):
        if src == ():
            return (np.asarray(g.sum()),)
        if len(src) == 1:
            return (g.sum(axis=0),)
        return (g.sum(axis=1, keepdims=True),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


# ---------------------------------------------------------------- spectral

def _spectral_weights(lam: np.ndarray, f: np.ndarray, df: np.ndarray) -> np.ndarray:
    diff = lam[:, None] - lam[None, :]
    same = np.abs(diff) < 1e-12 * max(1.0, float(np.abs(lam).max()))
    with np.errstate(divide="ignore", invalid="ignore"):
        w = (f[:, None] - f[None, :]) / diff
    return np.where(same, 0.5 * (df[:, None] + df[None, :]), w)


def sym_matrix_power(a, power: float, jitter: float = 1e-8, gap: float = 1e-9) -> Tensor:
    """A^power for a symmetric positive-definite matrix via eigendecomposition.

    Nearly repeated eigenvalues make the eigenvector derivative singular, so
    the input is jittered by ``jitter * I`` when any gap falls below ``gap``.
    """
    a = _wrap(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_matrix_power needs a square matrix, got {a.shape}")
    x = 0.5 * (a.data + a.data.T)
    lam, u = np.linalg.eigh(x)
    if lam.size > 1 and np.min(np.diff(lam)) < gap:
        x = x + jitter * np.eye(len(x))
        lam, u = np.linalg.eigh(x)
    if lam[0] <= 0:
        raise DomainError(f"matrix not positive definite (min eigenvalue {lam[0]:.3e})")
    f = lam ** power
    df = power * lam ** (power - 1.0)
    w = _spectral_weights(lam, f, df)
    out = (u * f) @ u.T

    def vjp(g):
        gs = 0.5 * (g + g.T)
        return (u @ (w * (u.T @ gs @ u)) @ u.T,)

    return _make(out, (a,), vjp)


def clamped_nuclear_norm(a, cap: float = 1.0) -> Tensor:
    """Sum of singular values, each clamped to at most ``cap``."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"clamped_nuclear_norm needs a matrix, got {a.shape}")
    u, s, vt = np.linalg.svd(a.data, full_matrices=False)
    active = (s < cap).astype(np.float64)
    out = np.minimum(s, cap).sum()
    return _make(np.asarray(out), (a,), lambda g: (g * (u * active) @ vt,))


def permute_cols(a, perm) -> Tensor:
    """Reorder the last axis: out[..., i] = a[..., perm[i]]."""
    a = _wrap(a)
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(a.shape[-1])):
        raise ShapeError(f"{perm} is not a permutation of {a.shape[-1]} columns")
    inv = np.argsort(perm)
    return _make(a.data[..., perm].copy(), (a,), lambda g: (g[..., inv],))
