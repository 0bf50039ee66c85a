"""Dense tensors with tape-free reverse-mode automatic differentiation.

Every trainable computation in the package is expressed with the operations
in this module.  A :class:`Tensor` wraps a numpy array; operations on tensors
that require gradients record their parents and a local backward rule, and
:meth:`Tensor.backward` walks the resulting graph in reverse topological
order.

Broadcasting follows numpy's trailing-axis rules; gradients of broadcast
operands are summed back to the operand's shape.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Graph",
    "CounterRNG",
    "DimensionError",
    "DomainError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "set_default_dtype",
    "get_default_dtype",
    "tensor",
    "zeros",
    "ones",
    "trace",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sigmoid",
    "log",
    "exp",
    "tanh",
    "swish",
    "relu",
    "abs_",
    "clamp",
    "elementwise",
    "sum_",
    "mean",
    "softmax",
    "log_softmax",
    "layernorm",
    "l1_mean",
    "cosine",
    "reduce_and_norm",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "conv1d_depthwise",
    "embedding",
    "linear",
    "cosine_zero_count",
    "reset_cosine_zero_count",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward, ...)."""


_DEFAULT_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True
_ids = itertools.count()
_COSINE_ZERO = [0]


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def cosine_zero_count() -> int:
    """Number of zero-vector cosine evaluations since the last reset."""
    return _COSINE_ZERO[0]


def reset_cosine_zero_count() -> None:
    _COSINE_ZERO[0] = 0


class CounterRNG:
    """Counter-based random stream keyed by ``(seed, step, stream)``.

    Draws for a given key never depend on how many other draws happened
    before, so replays of a training step are exact.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def generator(self, step: int, stream: int = 0) -> np.random.Generator:
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF,
                        ((int(step) & 0xFFFFFFFF) << 32) | (int(stream) & 0xFFFFFFFF)],
                       dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def uniform_open(self, step: int, stream: int, shape) -> np.ndarray:
        """Uniform draws on the open interval (0, 1)."""
        u = self.generator(step, stream).random(shape)
        # random() is [0, 1); nudge exact zeros into the open interval
        tiny = np.finfo(np.float64).tiny
        return np.where(u <= 0.0, tiny, u)


class Tensor:
    """An n-dimensional array that may participate in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_op", "_parents",
                 "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self, grad=None) -> None:
        backward(self, grad)


def _raise_item(t: Tensor):
    raise GraphError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = req
    out.grad = None
    out.name = None
    out._op = op
    out._id = next(_ids)
    out._consumed = False
    if req:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

@dataclass
class NodeRecord:
    op: str
    node_id: int
    input_ids: tuple[int, ...]
    output: Tensor


@dataclass
class Graph:
    """Topologically ordered view of the computation that produced a tensor."""

    nodes: list[NodeRecord] = field(default_factory=list)
    rng_seed: int | None = None
    rng_counter: int | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n.output for n in self.nodes if n.output.is_leaf]


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in node._parents:
            if p._id not in seen:
                stack.append((p, False))
    return order


def trace(root: Tensor, rng: CounterRNG | None = None, step: int | None = None) -> Graph:
    """Return the graph that produced ``root`` (parents before children)."""
    nodes = [NodeRecord(t._op, t._id, tuple(p._id for p in t._parents), t) for t in _topo(root)]
    return Graph(nodes, rng.seed if rng is not None else None, step)


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild the forward pass first")
    if grad is None:
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {loss._id: grad}
    for node in reversed(order):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            pg = _unbroadcast(pg, p.shape)
            prev = grads.get(p._id)
            grads[p._id] = pg if prev is None else prev + pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


# ---------------------------------------------------------------------------
# binary / unary elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return expit(x)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        bad = np.argwhere(a.data <= 0)[0]
        raise DomainError(f"log of non-positive entry {a.data[tuple(bad)]!r} at index {tuple(bad)}")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def swish(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    sg = _sigmoid_np(x)
    out = x * sg
    return _make(out, (a,), lambda g: (g * (sg + out * (1.0 - sg)),), "swish")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _make(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only on the open interior."""
    a = _as_tensor(a)
    x = a.data
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (x > lo_) & (x < hi_)
    return _make(np.clip(x, lo_, hi_), (a,), lambda g: (g * inside,), "clamp")


_UNARY = {"sigmoid": sigmoid, "log": log, "exp": exp, "tanh": tanh, "swish": swish,
          "relu": relu, "abs": abs_}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *args, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Dispatch a pointwise operation by name (``"clamp"`` takes ``lo``/``hi``)."""
    if kind in _UNARY:
        return _UNARY[kind](*args)
    if kind in _BINARY:
        return _BINARY[kind](*args)
    if kind == "clamp":
        return clamp(args[0], lo, hi)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# matmul and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g)

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` as one graph node; ``weight`` is (in, out)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        bias = _as_tensor(bias)
        out = out + bias.data

    def bw(g):
        gx = g @ wd.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "linear")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=ax, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    n = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    shape = a.shape

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.mean(a.data, axis=ax, keepdims=keepdims), (a,), bw, "mean")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=axis, keepdims=True))
    out = x - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layernorm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis`` (no affine)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _make(out, (a,), bw, "layernorm")


def l1_mean(a, b, weights=None) -> Tensor:
    """Mean absolute difference; ``weights`` (broadcastable, constant) selects entries.

    With weights the result is ``sum(w * |a - b|) / sum(w_broadcast)``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "l1_mean")
    diff = a.data - b.data
    if weights is None:
        w = None
        denom = diff.size
        val = np.abs(diff).sum() / denom
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=diff.dtype), diff.shape)
        denom = w.sum()
        val = (w * np.abs(diff)).sum() / denom
    sg = np.sign(diff)

    def bw(g):
        gd = g * sg / denom
        if w is not None:
            gd = gd * w
        return (gd, -gd)

    return _make(np.asarray(val), (a, b), bw, "l1_mean")


def cosine(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis``; pairs containing a zero vector give 0
    and identical vectors give exactly 1."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "cosine")
    ad, bd = np.broadcast_arrays(a.data, b.data)
    na = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))
    nb = np.sqrt((bd * bd).sum(axis=axis, keepdims=True))
    zero = (na == 0) | (nb == 0)
    nzero = int(zero.sum())
    if nzero:
        _COSINE_ZERO[0] += nzero
    safe_na = np.where(zero, 1.0, na)
    safe_nb = np.where(zero, 1.0, nb)
    dot = (ad * bd).sum(axis=axis, keepdims=True)
    c = np.where(zero, 0.0, dot / (safe_na * safe_nb))
    # dot / (na * nb) can miss 1 by an ulp for equal vectors; pin it so the
    # gradient at a perfect match is exactly zero
    same = np.all(ad == bd, axis=axis, keepdims=True) & ~zero
    c = np.where(same, 1.0, c)

    def bw(g):
        g = np.expand_dims(g, axis)
        ga = np.where(zero, 0.0, g * (bd / (safe_na * safe_nb) - c * ad / (safe_na ** 2)))
        gb = np.where(zero, 0.0, g * (ad / (safe_na * safe_nb) - c * bd / (safe_nb ** 2)))
        return ga, gb

    return _make(np.squeeze(c, axis=axis), (a, b), bw, "cosine")


def reduce_and_norm(kind: str, *args, axis=None, **kw) -> Tensor:
    """Dispatch a reduction or normalization by name."""
    if kind == "sum":
        return sum_(args[0], axis=axis, **kw)
    if kind == "mean":
        return mean(args[0], axis=axis, **kw)
    if kind == "softmax":
        return softmax(args[0], axis=-1 if axis is None else axis)
    if kind == "log_softmax":
        return log_softmax(args[0], axis=-1 if axis is None else axis)
    if kind == "layernorm":
        return layernorm(args[0], axis=-1 if axis is None else axis, **kw)
    if kind == "l1_mean":
        return l1_mean(*args, **kw)
    if kind == "cosine":
        return cosine(*args, axis=-1 if axis is None else axis)
    raise ValueError(f"unknown reduction kind {kind!r}")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {old} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    shape, dtype = a.shape, a.dtype
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}; shapes {[t.shape for t in ts]}") from None
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, ts, bw, "concat")


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def conv1d_depthwise(x, weight, bias=None, causal: bool = False) -> Tensor:
    """Per-channel 1-D convolution over time.

    ``x`` is (..., T, C), ``weight`` is (C, K).  Causal mode pads K-1 frames on
    the left, otherwise K//2 on each side (K odd).  Output keeps length T.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    C, K = weight.shape
    if x.shape[-1] != C:
        raise DimensionError(f"conv1d_depthwise: input channels {x.shape[-1]} != weight channels {C}")
    T = x.shape[-2]
    left = K - 1 if causal else K // 2
    right = K - 1 - left
    pad = [(0, 0)] * (x.ndim - 2) + [(left, right), (0, 0)]
    xp = np.pad(x.data, pad)
    wd = weight.data
    out = np.zeros(x.shape, dtype=x.dtype)
    for k in range(K):
        out += xp[..., k:k + T, :] * wd[:, k]
    if bias is not None:
        bias = _as_tensor(bias)
        out += bias.data

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=xp.dtype)
        gw = np.empty_like(wd)
        lead = tuple(range(g.ndim - 1))
        for k in range(K):
            gxp[..., k:k + T, :] += g * wd[:, k]
            gw[:, k] = (g * xp[..., k:k + T, :]).sum(axis=lead)
        gx = gxp[..., left:left + T, :]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=lead)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv1d_depthwise")


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DomainError(f"embedding index out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), bw, "embedding")
