"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op output that depends on a ``requires_grad`` input records a node
holding its inputs and a closure mapping the output gradient to input
gradients. Node ids come from one global counter, so sorting reachable
nodes by id is a valid topological order and :func:`backward` needs no
explicit graph walk beyond reachability.

Broadcasting is limited to scalar (shape ``()``) operands; any other
alignment goes through :func:`expand`.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ARCCOS_CLAMP = 1e-7
ARCCOS_DOMAIN_TOL = 1e-6

_ids = itertools.count(1)
_local = threading.local()
_seed = {"value": 0}


class GraphError(RuntimeError):
    """Raised on misuse of the differentiation graph."""


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


def manual_seed(seed: int) -> None:
    _seed["value"] = int(seed) & 0xFFFFFFFFFFFFFFFF


def rng_for(counter: int, seed: int | None = None) -> np.random.Generator:
    """Counter-based stream: same (seed, counter) always yields the same draws."""
    key = _seed["value"] if seed is None else int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=key, counter=int(counter)))


class _Node:
    __slots__ = ("id", "kind", "inputs", "backward_fn", "freed")

    def __init__(self, kind, inputs, backward_fn):
        self.id = next(_ids)
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.freed = False


class Tensor:
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return None if self._node is None else self._node.id

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: mul(self, -1.0)
    __getitem__ = lambda self, idx: slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def expand(self, shape):
        return expand(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, kind: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else np.asarray(data, dtype=np.float64)
    out.grad = None
    out._node = None
    out.requires_grad = False
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(kind, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------- graph


@dataclass
class NodeRecord:
    id: int
    kind: str
    input_ids: tuple


@dataclass
class Graph:
    """Topologically ordered view of the nodes reachable from one output."""

    nodes: list[NodeRecord] = field(default_factory=list)
    rng_seed: int = 0


def _reachable(root: Tensor) -> list[Tensor]:
    seen = set()
    order = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t._node is None or id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t._node.inputs)
    order.sort(key=lambda t: t._node.id)
    return order


def trace(root: Tensor) -> Graph:
    g = Graph(rng_seed=_seed["value"])
    for t in _reachable(root):
        g.nodes.append(NodeRecord(t._node.id, t._node.kind, tuple(i.node_id for i in t._node.inputs)))
    return g


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not require grad (detached graph)")
    if loss._node is None:
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        return
    if loss._node.freed:
        raise GraphError("graph already backpropagated; rebuild it or pass retain_graph=True")

    nodes = _reachable(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(nodes):
        g = grads.pop(id(t), None)
        node = t._node
        if node.freed:
            raise GraphError(f"graph node {node.id} ({node.kind}) was already freed")
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    if not retain_graph:
        for t in nodes:
            t._node.backward_fn = None
            t._node.freed = True


# ---------------------------------------------------------------- helpers


def _binary_check(kind, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g, shape):
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_grad(g, in_shape, axes, keepdims):
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, in_shape)


# ---------------------------------------------------------------- elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_check("mul", a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if ra else None,
                _unbroadcast(g * ad, bd.shape) if rb else None)

    return _make(ad * bd, "mul", (a, b), bw)


def matmul(a, b) -> Tensor:
    """Batched matmul. ``b`` may be 2-D and shared across ``a``'s leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if a.shape[-1] != b.shape[-2] or (not shared and a.shape[:-2] != b.shape[:-2]):
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if ra else None
        if not rb:
            gb = None
        elif shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, "matmul", (a, b), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    in_shape = x.shape
    return _make(out, "reshape", (x,), lambda g: (g.reshape(in_shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: no inputs")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ValueError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} along axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make(np.concatenate([t.data for t in ts], axis=ax), "concat", ts, bw)


def slice_(x: Tensor, idx) -> Tensor:
    x = as_tensor(x)
    in_shape = x.shape
    try:
        out = x.data[idx]
    except IndexError as e:
        raise ValueError(f"slice: {e} for shape {in_shape}") from None

    def bw(g):
        full = np.zeros(in_shape)
        full[idx] = g
        return (full,)

    return _make(np.array(out, dtype=np.float64), "slice", (x,), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    in_shape = x.shape

    def bw(g):
        full = np.zeros(in_shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, indices, np.moveaxis(g, ax, 0))
        return (full,)

    return _make(np.take(x.data, indices, axis=ax), "take", (x,), bw)


def pad(x: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as for ``np.pad``."""
    x = as_tensor(x)
    pad_width = [tuple(p) for p in pad_width]
    idx = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, x.shape))
    return _make(np.pad(x.data, pad_width), "pad", (x,), lambda g: (g[idx],))


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast to ``shape`` (numpy rules); gradient sums back."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ValueError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    in_shape = x.shape
    lead = len(shape) - len(in_shape)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(in_shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(np.array(out), "expand", (x,), bw)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    in_shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), "sum", (x,), lambda g: (_expand_grad(g, in_shape, axes, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _normalize_axes(axis, x.ndim)
    in_shape = x.shape
    n = int(np.prod([in_shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), "mean", (x,), lambda g: (_expand_grad(g / n, in_shape, axes, keepdims),))


def _ordered_sum(a: np.ndarray, axis: int) -> np.ndarray:
    # sequential accumulation of sorted terms; np.sum's pairwise/SIMD path
    # rounds differently depending on memory alignment
    return np.cumsum(np.sort(a, axis=axis), axis=axis).take(-1, axis=axis)


def canonical_sum(x: Tensor, axis: int = -1) -> Tensor:
    """Sum whose rounding does not depend on the order of terms along ``axis``.

    Terms are sorted before accumulation, so any permutation of the inputs
    along ``axis`` produces a bit-identical result.
    """
    x = as_tensor(x)
    ax = axis % x.ndim
    in_shape = x.shape
    out = _ordered_sum(x.data, ax)
    return _make(out, "canonical_sum", (x,), lambda g: (_expand_grad(g, in_shape, (ax,), False),))


def softmax(x: Tensor, axis: int = -1, canonical: bool = False) -> Tensor:
    """Softmax along ``axis``; ``canonical`` makes the normalizer order-independent."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    denom = np.expand_dims(_ordered_sum(e, axis), axis) if canonical else e.sum(axis=axis, keepdims=True)
    s = e / denom

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, "softmax", (x,), bw)


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, "layernorm", (x,), bw)


# ---------------------------------------------------------------- elementwise unary


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    m = x.data > 0
    return _make(np.where(m, x.data, 0.0), "relu", (x,), lambda g: (g * m,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(u)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _make(0.5 * xd * (1.0 + th), "gelu", (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, "exp", (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore"):
        y = np.log(xd)
    return _make(y, "log", (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _make(y, "sqrt", (x,), lambda g: (g * 0.5 / y,))


def abs_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * sgn,))


def clamp(x: Tensor, lo: float = -np.inf, hi: float = np.inf) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def arccos(x: Tensor) -> Tensor:
    """arccos with inputs clamped to [-1+1e-7, 1-1e-7].

    The derivative is evaluated at the clamped value, so gradients stay
    bounded at perfect alignment instead of vanishing or blowing up.
    """
    x = as_tensor(x)
    xd = x.data
    if np.any(np.abs(xd) > 1.0 + ARCCOS_DOMAIN_TOL) or np.any(np.isnan(xd)):
        worst = float(np.nanmax(np.abs(xd))) if not np.all(np.isnan(xd)) else float("nan")
        raise ValueError(f"arccos: input outside [-1, 1] (max |x| = {worst})")
    c = np.clip(xd, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP)
    dydx = -1.0 / np.sqrt(1.0 - c * c)
    return _make(np.arccos(c), "arccos", (x,), lambda g: (g * dydx,))


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber: r^2/2 inside |r| <= delta, delta*(|r| - delta/2) outside."""
    if delta <= 0:
        raise ValueError(f"huber: delta must be positive, got {delta}")
    x = as_tensor(x)
    r = x.data
    quad = np.abs(r) <= delta
    y = np.where(quad, 0.5 * r * r, delta * (np.abs(r) - 0.5 * delta))
    return _make(y, "huber", (x,), lambda g: (g * np.where(quad, r, delta * np.sign(r)),))


def cross3(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.shape[-1:] != (3,):
        raise ValueError(f"cross3: need matching (...,3) shapes, got {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(np.cross(ad, bd), "cross3", (a, b), lambda g: (np.cross(bd, g), np.cross(g, ad)))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """x / max(||x||, eps) over the last axis."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    big = n > eps
    nn = np.where(big, n, eps)
    y = x.data / nn

    def bw(g):
        proj = np.where(big, (y * g).sum(axis=-1, keepdims=True), 0.0)
        return ((g - y * proj) / nn,)

    return _make(y, "l2_normalize", (x,), bw)


# ---------------------------------------------------------------- rotations


def svd_project(m: np.ndarray):
    """Nearest special-orthogonal matrices to a stack of 3x3 matrices.

    Returns ``(R, U, sigma, V)`` with ``R = U diag(1, 1, d) V^T``, ``d`` the sign
    making ``det R = +1`` and ``sigma`` the correspondingly signed singular values.
    """
    u, s, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    d = np.where(d == 0, 1.0, d)
    u = u.copy()
    u[..., :, 2] *= d[..., None]
    s = s.copy()
    s[..., 2] *= d
    return u @ vt, u, s, np.swapaxes(vt, -1, -2)


def svd_orthogonalize(x: Tensor, min_sigma: float = 1e-12) -> Tensor:
    """Map (..., 9) raw outputs (row-major 3x3) to rotation matrices (..., 3, 3)."""
    x = as_tensor(x)
    if x.shape[-1:] != (9,):
        raise ValueError(f"svd_orthogonalize: last axis must be 9, got {x.shape}")
    lead = x.shape[:-1]
    m = x.data.reshape(lead + (3, 3))
    if not np.all(np.isfinite(m)):
        raise ValueError("svd_orthogonalize: non-finite input")
    r, u, sig, v = svd_project(m)
    if np.any(np.abs(sig).min(axis=-1) < min_sigma):
        raise ValueError("svd_orthogonalize: rank-deficient input (smallest singular value < 1e-12)")

    def bw(g):
        k = np.swapaxes(v, -1, -2) @ np.swapaxes(r, -1, -2) @ g @ v
        denom = sig[..., :, None] + sig[..., None, :]
        w = k / denom
        y = v @ w @ np.swapaxes(v, -1, -2)
        gm = r @ (y - np.swapaxes(y, -1, -2))
        return (gm.reshape(lead + (9,)),)

    return _make(r, "svd_orthogonalize", (x,), bw)


OP_KINDS = (
    "add", "sub", "mul", "matmul", "reshape", "transpose", "concat", "slice", "take", "pad",
    "expand", "sum", "mean", "canonical_sum", "softmax", "layernorm", "relu", "gelu", "exp",
    "log", "sqrt", "abs", "clamp", "arccos", "huber", "cross3", "l2_normalize",
    "svd_orthogonalize",
)
