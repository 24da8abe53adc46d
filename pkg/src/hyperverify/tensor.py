"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable op builds a node holding its parents and a closure that
maps the output gradient to one gradient per parent. ``backward`` walks the
graph once in reverse topological order.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

_GRAD_ENABLED = True
# debug mode: every forward op checks its output is finite
DEBUG = os.environ.get("HYPERVERIFY_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """An op or component was configured inconsistently."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-d array with an optional handle into the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    if DEBUG and not np.isfinite(data).all() and all(np.isfinite(p.data).all() for p in parents):
        raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray] | None:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` accumulate into ``.grad``. When
    ``params`` is given, returns ``{param: grad}`` with zeros for parameters
    the loss does not reach.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is None:
        return None
    return {p: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}


# ---------------------------------------------------------- elementwise ops


def _operands(a, b) -> tuple[Tensor, Tensor]:
    """Wrap both operands; a bare scalar takes the other side's float dtype."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor) and np.ndim(a) == 0:
        a = Tensor(a, dtype=b.dtype)
    elif not isinstance(b, Tensor) and isinstance(a, Tensor) and np.ndim(b) == 0:
        b = Tensor(b, dtype=a.dtype)
    return as_tensor(a), as_tensor(b)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _make(ad ** exponent, (a,),
                 lambda g: (g * exponent * ad ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient is zero where the clip is active."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _make(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF from ``ndtr``."""
    x = a.data
    cdf = ndtr(x)
    if not (_GRAD_ENABLED and a.requires_grad):
        cdf *= x
        return _make(cdf, (a,), None, "gelu")

    def grad_fn(g):
        d = x * x
        d *= -0.5
        np.exp(d, out=d)
        d *= x
        d *= _INV_SQRT2PI
        d += cdf
        d *= g
        return (d,)

    return _make(x * cdf, (a,), grad_fn, "gelu")


# -------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axes, keepdims), 1.0 / n)


# ------------------------------------------------------------ shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape
    dtype = a.dtype

    key = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(k, (slice, int, type(None), type(Ellipsis))) for k in key)

    def grad_fn(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), grad_fn, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), grad_fn, "matmul")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``[N, C]`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), (logits,), grad_fn, "cross_entropy")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    xd = x.data
    nrm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True) + eps)
    y = xd / nrm

    def grad_fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / nrm,)

    return _make(y, (x,), grad_fn, "l2_normalize")


# ------------------------------------------------------------ normalization


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis (population variance), then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{shift.shape} do not match last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gs = g.sum(axis=lead)
        gx = g * gd
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gs

    return _make(xhat * gd + shift.data, (x, gain, shift), grad_fn, "layer_norm")


def rms_norm_nonparam(x: Tensor, eps: float = 1e-8, axes: tuple[int, int] = (-2, -1)) -> Tensor:
    """Divide each channel map by its root-mean-square over the spatial ``axes``."""
    xd = x.data
    axes = tuple(sorted(a % xd.ndim for a in axes))
    idx = "abcdefghij"[:xd.ndim]
    kept = "".join(c for i, c in enumerate(idx) if i not in axes)
    # einsum reduces the squares without materializing them
    ss = np.expand_dims(np.einsum(f"{idx},{idx}->{kept}", xd, xd), axes)
    r = np.sqrt(ss / (xd.shape[axes[0]] * xd.shape[axes[1]]) + eps)
    y = xd / r

    def grad_fn(g):
        return ((g - y * (g * y).mean(axis=axes, keepdims=True)) / r,)

    return _make(y, (x,), grad_fn, "rms_norm")


# ------------------------------------------------------------ convolution


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_multi(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                 padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped cross-correlation for a stack of independent networks.

    Layout is sample-innermost: ``x`` is ``[J, C_in, H, W, K]`` where ``J``
    may be 1 to share the ``K`` inputs across all networks, ``w`` is
    ``[J, C_out, C_in/groups, k, k]`` and ``bias`` is ``[J, C_out]``. Network
    ``j`` convolves each of its ``K`` inputs with its own filters and the
    result is ``[J, C_out, H', W', K]``. Keeping samples innermost lets every
    group reduce to one batched GEMM with no transposes.
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv2d_multi wants 5-d x and w, got {x.shape} and {w.shape}")
    jx, cin, h, wd, kb = x.shape
    jw, cout, cg, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"square kernels only, got {k}x{k2}")
    if groups < 1 or cin % groups or cout % groups:
        raise ConfigError(f"groups={groups} must divide C_in={cin} and C_out={cout}")
    if cg != cin // groups:
        raise ShapeError(f"weight expects {cg * groups} input channels, x has {cin}")
    if jx not in (1, jw):
        raise ShapeError(f"x network dim {jx} incompatible with weight network dim {jw}")
    if bias is not None and bias.shape != (jw, cout):
        raise ShapeError(f"bias shape {bias.shape} != {(jw, cout)}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"bad stride={stride} / padding={padding}")
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {k} too large for input {h}x{wd} with padding {padding}")

    cog = cout // groups
    m = ho * wo * kb
    xd = x.data
    dtype = np.result_type(xd.dtype, w.data.dtype)
    if padding:
        xp = np.zeros((jx, cin, h + 2 * padding, wd + 2 * padding, kb), dtype=dtype)
        xp[:, :, padding: padding + h, padding: padding + wd] = xd
    else:
        xp = xd
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    offsets = [(di, dj) for di in range(k) for dj in range(k)]

    # cols[g]: [J', cg*k*k, M] with rows ordered (c, di, dj) to match w's memory order
    call = np.empty((jx, cin, k * k, ho, wo, kb), dtype=dtype)
    for t, (di, dj) in enumerate(offsets):
        call[:, :, t] = xp[:, :, di: di + hs: stride, dj: dj + ws: stride]
    # per-group slices of one buffer reshape to views, no second copy
    cols = [call[:, gi * cg: (gi + 1) * cg].reshape(jx, cg * k * k, m) for gi in range(groups)]
    wm = w.data.reshape(jw, groups, cog, cg * k * k)
    shared = jx == 1 and jw > 1

    out = np.empty((jw, cout, ho, wo, kb), dtype=dtype)
    ov = out.reshape(jw, groups, cog, m)
    for gi in range(groups):
        if shared:
            ov[:, gi] = (wm[:, gi].reshape(jw * cog, -1) @ cols[gi][0]).reshape(jw, cog, m)
        else:
            np.matmul(wm[:, gi], cols[gi], out=ov[:, gi])
    if bias is not None:
        out += bias.data[:, :, None, None, None]

    def grad_fn(gout):
        gv = gout.reshape(jw, groups, cog, m)
        gb = gout.sum(axis=(2, 3, 4)) if bias is not None else None
        gw = np.empty((jw, groups, cog, cg * k * k), dtype=gout.dtype) if w.requires_grad else None
        gxp = np.zeros(xp.shape, dtype=gout.dtype) if x.requires_grad else None
        for gi in range(groups):
            go = gv[:, gi]
            if gw is not None:
                if shared:
                    gw[:, gi] = (go.reshape(jw * cog, m) @ cols[gi][0].T).reshape(jw, cog, -1)
                else:
                    gw[:, gi] = go @ cols[gi].transpose(0, 2, 1)
            if gxp is not None:
                if shared:
                    gc = (wm[:, gi].reshape(jw * cog, -1).T @ go.reshape(jw * cog, m))[None]
                else:
                    gc = wm[:, gi].transpose(0, 2, 1) @ go
                gc = gc.reshape(jx, cg, k * k, ho, wo, kb)
                gxs = gxp[:, gi * cg: (gi + 1) * cg]
                for t, (di, dj) in enumerate(offsets):
                    gxs[:, :, di: di + hs: stride, dj: dj + ws: stride] += gc[:, :, t]
        if gxp is not None and padding:
            gxp = gxp[:, :, padding: padding + h, padding: padding + wd]
        return gxp, (gw.reshape(w.shape) if gw is not None else None), gb

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, grad_fn, "conv2d")


def conv2d_grouped(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                   padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-d cross-correlation on an ``[N, C_in, H, W]`` batch."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d_grouped wants 4-d x and w, got {x.shape} and {w.shape}")
    b = None if bias is None else reshape(bias, (1, -1))
    xt = reshape(transpose(x, (1, 2, 3, 0)), (1,) + x.shape[1:] + (x.shape[0],))
    out = conv2d_multi(xt, reshape(w, (1,) + w.shape), b,
                       stride=stride, padding=padding, groups=groups)
    return transpose(reshape(out, out.shape[1:]), (3, 0, 1, 2))
