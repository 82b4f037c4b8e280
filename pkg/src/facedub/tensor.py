"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Every operation used by the pipeline is either a primitive registered here
(with a hand-written backward) or a composition of such primitives, so the
whole graph can be verified against central finite differences.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
STD_EPS = 1e-5  # variance guard inside channel statistics


class ContractViolation(ValueError):
    """A caller broke an operation's stated precondition."""


class GradCheckFailure(RuntimeError):
    """A finite-difference probe produced a non-finite value."""


class Tensor:
    """One node of a reverse-mode differentiation graph.

    Leaves hold data (parameters additionally set requires_grad); interior
    nodes remember their parents and a closure that maps the incoming
    gradient to one gradient per parent. Data is treated as immutable once
    a node participates in a graph; the training loop mutates leaf data
    only between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


GradientMap = dict  # graph-leaf Tensor -> accumulated gradient array


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def make_node(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Build a graph node from already-computed forward data.

    ``grad_fn(gout)`` must return one gradient array per parent (``None``
    where a parent needs no gradient). This is the extension point custom
    primitives (e.g. the bilinear warp) use to register their backward.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _toposort(root: Tensor) -> list:
    """Post-order of the requires_grad subgraph: leaves first, root last."""
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
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


def backward(root: Tensor) -> GradientMap:
    """Differentiate a scalar root; returns {leaf: accumulated gradient}.

    Leaf ``.grad`` buffers accumulate across calls until explicitly reset,
    so parameter gradients from several roots can be summed.
    """
    if root.data.size != 1:
        raise ContractViolation(f"backward() root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    table: dict = {id(root): np.ones_like(root.data)}
    leaves: GradientMap = {}
    for node in reversed(_toposort(root)):
        g = table.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            table[key] = pg if key not in table else table[key] + pg
    return leaves


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return make_node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return make_node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return make_node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return make_node(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _wrap(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _wrap(a)
    return make_node(
        a.data ** exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def texp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def tlog(a) -> Tensor:
    a = _wrap(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tsqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60, 60)))
    return make_node(out, (a,), lambda g: (g * sig,))


def tabs(a) -> Tensor:
    a = _wrap(a)
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _expand_reduced(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    axes = _axis_tuple(axis, a.data.ndim)
    out = a.data.sum(axis=axes if a.data.ndim else None, keepdims=keepdims)
    return make_node(
        out, (a,), lambda g: (_expand_reduced(g, a.data.shape, axes, keepdims),)
    )


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    axes = _axis_tuple(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes])) if a.data.ndim else 1
    out = a.data.mean(axis=axes if a.data.ndim else None, keepdims=keepdims)
    return make_node(
        out,
        (a,),
        lambda g: (_expand_reduced(g, a.data.shape, axes, keepdims) / count,),
    )


def variance(a, axis=None, keepdims=False) -> Tensor:
    """Population variance, composed from differentiable primitives."""
    a = _wrap(a)
    centered = sub(a, tmean(a, axis=axis, keepdims=True))
    return tmean(mul(centered, centered), axis=axis, keepdims=keepdims)


def l1_norm(a) -> Tensor:
    return tsum(tabs(a))


def l2_norm(a) -> Tensor:
    a = _wrap(a)
    return tsqrt(tsum(mul(a, a)))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(np.concatenate([t.data for t in ts], axis=axis), ts, grad_fn)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    base = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != base:
            raise ContractViolation(f"stack: shapes {base} and {t.data.shape} differ")

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return make_node(np.stack([t.data for t in ts], axis=axis), ts, grad_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractViolation(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )
    return make_node(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x, w, b=None) -> Tensor:
    """Affine map y = W x + b for a vector x, or row-wise for a (B, n) batch."""
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim == 1:
        if w.data.shape[1] != x.data.shape[0]:
            raise ContractViolation(
                f"linear: weight {w.data.shape} does not accept input {x.data.shape}"
            )
        out = reshape(matmul(w, reshape(x, (-1, 1))), (w.data.shape[0],))
    elif x.data.ndim == 2:
        out = matmul(x, transpose(w))
    else:
        raise ContractViolation(f"linear: input must be 1-D or 2-D, got {x.data.shape}")
    if b is not None:
        out = add(out, b)
    return out


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution of a (Cin, H, W) map with a (Cout, Cin, kh, kw) kernel.

    Zero padding; forward and backward both go through one im2col patch
    matrix so gradients for input, kernel, and bias come from plain matmuls.
    """
    x, w = _wrap(x), _wrap(w)
    if x.data.ndim != 3 or w.data.ndim != 4 or x.data.shape[0] != w.data.shape[1]:
        raise ContractViolation(
            f"conv2d: incompatible shapes input {x.data.shape}, kernel {w.data.shape}"
        )
    cin, h, wd = x.data.shape
    cout, _, kh, kw = w.data.shape
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (wd + 2 * pad - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise ContractViolation(
            f"conv2d: kernel {w.data.shape} does not fit input {x.data.shape} (pad={pad})"
        )
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(hout * wout, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).T.reshape(cout, hout, wout)
    parents = [x, w]
    if b is not None:
        b = _wrap(b)
        out = out + b.data[:, None, None]
        parents.append(b)

    def grad_fn(g):
        gmat = g.reshape(cout, -1).T
        gw = (gmat.T @ cols).reshape(w.data.shape)
        gcols = (gmat @ wmat).reshape(hout, wout, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + stride * hout : stride, j : j + stride * wout : stride] += (
                    gcols[:, :, :, i, j].transpose(2, 0, 1)
                )
        gx = gxp[:, pad : pad + h, pad : pad + wd]
        if len(parents) == 3:
            return gx, gw, g.sum(axis=(1, 2))
        return gx, gw

    return make_node(out, parents, grad_fn)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of a (C, H, W) map."""
    x = _wrap(x)
    c, h, w = x.data.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)
    return make_node(
        out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)
    )


def avg_pool2(x) -> Tensor:
    """Area-average 2x downsampling of a (C, H, W) map with even extents."""
    x = _wrap(x)
    c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ContractViolation(f"avg_pool2: extents must be even, got {x.data.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return make_node(
        out, (x,), lambda g: (g.repeat(2, axis=1).repeat(2, axis=2) / 4.0,)
    )


# ---------------------------------------------------------------------------
# normalization


def softmax(x, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax with max-subtraction for numerical stability."""
    if temperature <= 0:
        raise ContractViolation(f"softmax: temperature must be > 0, got {temperature}")
    x = _wrap(x)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out / temperature,)

    return make_node(out, (x,), grad_fn)


def channel_stats(feature) -> tuple:
    """Per-channel spatial mean and guarded std of a (C, H, W) feature.

    std = sqrt(population variance + 1e-5); the guard keeps constant
    channels differentiable and finite.
    """
    feature = _wrap(feature)
    if feature.data.ndim != 3:
        raise ContractViolation(
            f"channel_stats: expected a (C, H, W) feature, got {feature.data.shape}"
        )
    c = feature.data.shape[0]
    mu_keep = tmean(feature, axis=(1, 2), keepdims=True)
    centered = sub(feature, mu_keep)
    var = tmean(mul(centered, centered), axis=(1, 2))
    std = tsqrt(add(var, STD_EPS))
    return reshape(mu_keep, (c,)), std


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Returns max_i |analytic_i - central_i| / max(1, |central_i|). Raises
    GradCheckFailure naming the coordinate if any probe is non-finite.
    """
    if h <= 0:
        raise ContractViolation(f"grad_check: step must be > 0, got {h}")
    base = np.asarray(x.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ContractViolation(f"grad_check: f must be scalar-valued, got {out.shape}")
    backward(out)
    analytic = (
        probe.grad.reshape(-1)
        if probe.grad is not None
        else np.zeros(base.size, dtype=np.float64)
    )
    worst = 0.0
    for i in range(base.size):
        values = []
        for sign in (+1.0, -1.0):
            shifted = base.copy()
            shifted.reshape(-1)[i] += sign * h
            val = f(Tensor(shifted)).item()
            if not np.isfinite(val):
                raise GradCheckFailure(f"non-finite function value at coordinate {i}")
            values.append(val)
        central = (values[0] - values[1]) / (2.0 * h)
        err = abs(analytic[i] - central) / max(1.0, abs(central))
        worst = max(worst, err)
    return worst
