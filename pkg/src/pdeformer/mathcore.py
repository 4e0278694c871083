"""Dense float64 tensors and a tape-based reverse-mode differentiation engine.

Every model in the package is assembled from the primitives defined here.
Operations are plain functions over :class:`Tensor`. When a :class:`DiffGraph`
is active (``with graph:``) and at least one input belongs to it, the op is
appended to the tape; otherwise it just computes a value.

    g = DiffGraph()
    with g:
        x = g.leaf(np.array([3.0]), "x")
        y = g.leaf(np.array([4.0]), "y")
        z = sum_(mul(x, y))
    grads = backward(g, z)
    grads.of(x)   # -> array([4.])
"""
from __future__ import annotations

import contextvars
import functools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LN_EPS = 1e-5
_EXACT_MATMUL_MAX = 8

_active_graph: contextvars.ContextVar["DiffGraph | None"] = contextvars.ContextVar(
    "pdeformer_active_graph", default=None
)


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    """A primitive produced NaN or Inf."""

    def __init__(self, op: str, node: int | None, detail: str = ""):
        self.op = op
        self.node = node
        msg = f"non-finite value produced by op '{op}'"
        if node is not None:
            msg += f" (node {node})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def _as_array(data) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if any(n <= 0 for n in arr.shape):
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    return arr


class Tensor:
    """Immutable dense array of 64-bit reals.

    ``data`` is a read-only view; use :meth:`numpy` for a writable copy.
    """

    __slots__ = ("_data", "_graph", "_node")

    def __init__(self, data):
        arr = _as_array(data)
        if not np.isfinite(arr).all():
            raise NumericalError("construct", None, "tensor data must be finite")
        arr.flags.writeable = False
        self._data = arr
        self._graph = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, graph=None, node=None) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr)
        arr.flags.writeable = False
        t._data = arr
        t._graph = graph
        t._node = node
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def node(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(()))

    def __repr__(self):
        tag = f", node={self._node}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(shape, float(x)))
    return Tensor(x)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[int | None, ...]
    value: np.ndarray
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    name: str | None = None


class DiffGraph:
    """Append-only tape of primitive ops for one forward/backward pass.

    A graph is single-writer; do not share one between threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self):
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc):
        _active_graph.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Tensor:
        arr = value.numpy() if isinstance(value, Tensor) else _as_array(value)
        if not np.isfinite(arr).all():
            raise NumericalError("leaf", len(self.nodes), f"parameter {name!r} is not finite")
        node = len(self.nodes)
        self.nodes.append(_Node("leaf", (), arr, None, name))
        return Tensor._wrap(arr, self, node)

    def _append(self, op, inputs, value, vjp) -> Tensor:
        ids = tuple(t._node if t._graph is self else None for t in inputs)
        node = len(self.nodes)
        self.nodes.append(_Node(op, ids, value, vjp))
        return Tensor._wrap(value, self, node)


class Gradients(Mapping[int, np.ndarray]):
    """Node id -> accumulated gradient of the root."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, node: int) -> np.ndarray:
        return self._grads[node]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def of(self, t: Tensor) -> np.ndarray:
        """Gradient for ``t``; zeros if the root does not depend on it."""
        if t._node is None:
            raise KeyError("tensor is not on a graph")
        g = self._grads.get(t._node)
        return np.zeros(t.shape) if g is None else g


def backward(graph: DiffGraph, root: Tensor | int) -> Gradients:
    """Reverse sweep from a scalar ``root``; returns gradients for every reached node.

    Nodes are replayed in reverse construction order, so the accumulation
    order (and thus the result) is deterministic.
    """
    rid = root if isinstance(root, int) else root._node
    if rid is None or (isinstance(root, Tensor) and root._graph is not graph):
        raise ValueError("root is not recorded on this graph")
    if not 0 <= rid < len(graph.nodes):
        raise ValueError(f"no node {rid} in graph")
    if graph.nodes[rid].value.size != 1:
        raise ShapeError(f"backward needs a scalar root, node {rid} has shape "
                         f"{graph.nodes[rid].value.shape}")
    grads: list[np.ndarray | None] = [None] * (rid + 1)
    grads[rid] = np.ones_like(graph.nodes[rid].value)
    for i in range(rid, -1, -1):
        g = grads[i]
        node = graph.nodes[i]
        if g is None or node.vjp is None:
            continue
        for src, gi in zip(node.inputs, node.vjp(g)):
            if src is None or gi is None:
                continue
            grads[src] = gi if grads[src] is None else grads[src] + gi
    return Gradients({i: g for i, g in enumerate(grads) if g is not None})


def _quiet(fn):
    # overflow becomes a NumericalError in _record, so numpy's warning is noise
    @functools.wraps(fn)
    def wrapped(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)
    return wrapped


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    graph = _active_graph.get()
    tracked = graph is not None and any(t._graph is graph for t in inputs)
    if not np.isfinite(value).all():
        raise NumericalError(op, len(graph.nodes) if tracked else None)
    if not tracked:
        return Tensor._wrap(value)
    return graph._append(op, inputs, value, vjp)


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- primitives


@_quiet
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


@_quiet
def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


@_quiet
def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.data, b.data
    return _record("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


@_quiet
def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def _check_row(op, x: Tensor, v: Tensor):
    if v.ndim != 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError(f"{op}: vector {v.shape} does not match rows of {x.shape}")


@_quiet
def add_row(x: Tensor, v: Tensor) -> Tensor:
    """x + v applied to every row (last axis) of x."""
    _check_row("add_row", x, v)
    d = v.shape[0]
    return _record("add_row", x.data + v.data, (x, v),
                   lambda g: (g, g.reshape(-1, d).sum(axis=0)))


@_quiet
def mul_row(x: Tensor, v: Tensor) -> Tensor:
    """x * v applied to every row (last axis) of x."""
    _check_row("mul_row", x, v)
    d = v.shape[0]
    xv, vv = x.data, v.data
    return _record("mul_row", xv * vv, (x, v),
                   lambda g: (g * vv, (g * xv).reshape(-1, d).sum(axis=0)))


def _ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # sums over the inner index in order, one rounding per multiply and per add
    out = np.zeros(a.shape[:-1] + (b.shape[-1],))
    for i in range(a.shape[-1]):
        out += a[..., :, i:i + 1] * b[..., i:i + 1, :]
    return out


def _matmul_value(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape[-2:]
    n = b.shape[-1]
    with np.errstate(over="ignore", invalid="ignore"):  # caught by _record
        if max(m, k, n) <= _EXACT_MATMUL_MAX:
            return _ordered_matmul(a, b)
        return np.matmul(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` is either a matrix applied to the last axis of ``a`` (any leading
    batch axes), or a stack with the same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} x {b.shape}")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ for {a.shape} x {b.shape}")
    av, bv = a.data, b.data
    value = _matmul_value(av, bv)

    if bv.ndim == 2:
        def vjp(g):
            k = av.shape[-1]
            ga = np.matmul(g, bv.T)
            gb = np.matmul(av.reshape(-1, k).T, g.reshape(-1, g.shape[-1]))
            return ga, gb
    else:
        def vjp(g):
            return np.matmul(g, np.swapaxes(bv, -1, -2)), np.matmul(np.swapaxes(av, -1, -2), g)

    return _record("matmul", value, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    value = a.data.reshape(tuple(shape))
    return _record("reshape", value, (a,), lambda g: (g.reshape(old),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NumericalError below
        out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


@_quiet
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return _record("softmax", s, (x,), vjp)


@_quiet
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row standardisation (population variance + eps), then gain/bias."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError("layer_norm needs a row width of at least 2")
    _check_row("layer_norm", x, gain)
    _check_row("layer_norm", x, bias)
    xv = x.data
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.data

    def vjp(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return _record("layer_norm", xhat * gv + bias.data, (x, gain, bias), vjp)


@_quiet
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    y = np.asarray(labels)
    n, c = logits.shape
    if y.shape != (n,) or not np.issubdtype(y.dtype, np.integer):
        raise ShapeError(f"labels must be {n} integers, got {y.shape} {y.dtype}")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logsum - z[rows, y])

    def vjp(g):
        p = np.exp(z - logsum[:, None])
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _record("cross_entropy", np.asarray(loss), (logits,), vjp)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _record("sum", np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _axis(x, axis)
    return _record("sum", x.data.sum(axis=ax), (x,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[_axis(x, axis)]
    return scale(sum_(x, axis), 1.0 / n)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding ids must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"token id out of range [0, {table.shape[0]})")
    tshape = table.shape

    def vjp(g):
        out = np.zeros(tshape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("embedding", table.data[idx], (table,), vjp)


def _second_difference(u: np.ndarray, dx: float) -> np.ndarray:
    padded = np.zeros(u.shape[:-2] + (u.shape[-2] + 2, u.shape[-1]))
    padded[..., 1:-1, :] = u
    return (padded[..., 2:, :] - 2.0 * u + padded[..., :-2, :]) / (dx * dx)


def laplacian1d(u: Tensor, dx: float) -> Tensor:
    """Second central difference along axis -2 with zero ghost rows at both ends."""
    if u.ndim < 2 or u.shape[-2] < 2:
        raise ShapeError(f"laplacian needs at least 2 positions along axis -2, got {u.shape}")
    if dx <= 0:
        raise ValueError("dx must be positive")
    # the zero-Dirichlet operator is symmetric, so it is its own adjoint
    return _record("laplacian", _second_difference(u.data, dx), (u,),
                   lambda g: (_second_difference(g, dx),))


# ------------------------------------------------------------------ checking


def relative_error(a, b, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(f: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-5) -> list[float]:
    """Relative error between tape gradients and central differences, per input.

    ``f`` maps tensors to a scalar tensor; it is evaluated once on a graph and
    then repeatedly without one for the finite differences.
    """
    arrays = [np.array(x, dtype=float) for x in inputs]
    g = DiffGraph()
    with g:
        leaves = [g.leaf(x) for x in arrays]
        root = f(*leaves)
    grads = backward(g, root)
    errors = []
    for i, x in enumerate(arrays):
        def fi(xi, i=i):
            args = [Tensor(a) for a in arrays]
            args[i] = Tensor(xi)
            return f(*args).item()
        errors.append(relative_error(grads.of(leaves[i]), numeric_gradient(fi, x, h)))
    return errors
