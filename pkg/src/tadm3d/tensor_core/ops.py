"""Differentiable operations over :class:`Tensor`.

Every op computes its forward result with numpy and registers a closure that
maps the output gradient to per-parent gradients. Shapes follow the
``(N, C, D, H, W)`` convention for volumes.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, ContractError, DimensionError
from . import kernels
from .tensor import Tensor, make_node

_AXES = ("batch", "channels", "depth", "height", "width")
GN_EPS = 1e-5


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast {b.shape} onto {a.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "sub")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _broadcast_shape(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "mul")


def scale(a: Tensor, s: float):
    s = float(s)
    out = a.data * a.data.dtype.type(s)

    def bw(g):
        return (g * g.dtype.type(s),)

    return make_node(out, (a,), bw, "scale")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(a: Tensor):
    sig = _sigmoid(a.data)
    out = a.data * sig

    def bw(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return make_node(out, (a,), bw, "silu")


def elementwise(kind: str, a, b=None):
    """Dispatch by name: add, sub, mul, scale (b scalar) or silu (b unused)."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(as_tensor(a), b)
    if kind == "silu":
        return silu(as_tensor(a))
    raise ConfigurationError(f"unknown elementwise op {kind!r}")


def clip(a: Tensor, lo: float, hi: float):
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * inside,)

    return make_node(out, (a,), bw, "clip")


# ---------------------------------------------------------------- shape ops

def reshape(a: Tensor, shape):
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return make_node(out, (a,), bw, "reshape")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (m, n) in enumerate(zip(ref, t.shape)):
            if ax != axis and m != n:
                raise DimensionError(f"concat: {_AXES[ax] if len(ref) == 5 else ax} extent {n} != {m}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        res = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                res.append(g[tuple(idx)])
            else:
                res.append(None)
        return tuple(res)

    return make_node(out, tuple(tensors), bw, "concat")


def reduce_sum(a: Tensor, axis=None):
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.dtype),)

    return make_node(out, (a,), bw, "sum")


def reduce_mean(a: Tensor, axis=None):
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(reduce_sum(a, axis), 1.0 / n)


def global_avg_pool(a: Tensor):
    """(N, C, D, H, W) -> (N, C)."""
    return reduce_mean(a, axis=(2, 3, 4))


def upsample_nearest(a: Tensor, target=None):
    """Repeat every voxel 2x per spatial axis, then crop to ``target`` extents."""
    up = a.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)
    if target is None:
        target = up.shape[2:]
    td, th, tw = target
    if td > up.shape[2] or th > up.shape[3] or tw > up.shape[4]:
        raise DimensionError(f"upsample target {tuple(target)} exceeds {up.shape[2:]}")
    out = np.ascontiguousarray(up[:, :, :td, :th, :tw])

    def bw(g):
        N, C, D, H, W = a.shape
        full = np.zeros((N, C, 2 * D, 2 * H, 2 * W), dtype=g.dtype)
        full[:, :, :td, :th, :tw] = g
        return (full.reshape(N, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)),)

    return make_node(out, (a,), bw, "upsample")


# ---------------------------------------------------------------- linear / conv

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None):
    """out = x @ weight.T + bias with x (N, F), weight (G, F), bias (G,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input features {x.shape[1]} != weight features {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=0) if bias.requires_grad else None)
        return tuple(res)

    return make_node(out, parents, bw, "linear")


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0):
    """3-D cross-correlation, ``x`` (N, Cin, D, H, W), ``kernel`` (Cout, Cin, k, k, k)."""
    if x.ndim != 5:
        raise DimensionError(f"conv3d input must be 5-D (N, C, D, H, W), got {x.ndim}-D")
    if kernel.ndim != 5:
        raise DimensionError(f"conv3d kernel must be 5-D, got {kernel.ndim}-D")
    cout, cin, k, k2, k3 = kernel.shape
    if not (k == k2 == k3):
        raise DimensionError(f"conv3d kernel must be cubic, got {kernel.shape[2:]}")
    if k % 2 == 0:
        raise ConfigurationError(f"conv3d kernel size must be odd, got {k}")
    if x.shape[1] != cin:
        raise DimensionError(f"conv3d channels axis: input has {x.shape[1]}, kernel expects {cin}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv3d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    N = x.shape[0]
    out_sp = []
    for ax in (2, 3, 4):
        ext = x.shape[ax] + 2 * padding
        if ext < k:
            raise DimensionError(f"conv3d {_AXES[ax]} axis: padded extent {ext} < kernel {k}")
        out_sp.append((ext - k) // stride + 1)
    Do, Ho, Wo = out_sp
    xp = x.data
    if padding:
        pw = ((0, 0), (0, 0)) + ((padding, padding),) * 3
        xp = np.pad(xp, pw)
    xp = np.ascontiguousarray(xp)
    P = N * Do * Ho * Wo
    if k == 1 and stride == 1:
        patches = xp.transpose(0, 2, 3, 4, 1).reshape(P, cin)
    else:
        patches = kernels.im2col3d(xp, k, stride, (Do, Ho, Wo))
    w2 = kernel.data.reshape(cout, -1)
    out = (patches @ w2.T).reshape(N, Do, Ho, Wo, cout).transpose(0, 4, 1, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1, 1)
    out = np.ascontiguousarray(out)
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    xp_shape = xp.shape

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(P, cout)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gt.T @ patches).reshape(kernel.shape)
        if x.requires_grad:
            dpatches = gt @ w2
            if k == 1 and stride == 1:
                dxp = dpatches.reshape(N, *xp_shape[2:], cin).transpose(0, 4, 1, 2, 3)
            else:
                dxp = kernels.col2im3d(dpatches, xp_shape, k, stride, (Do, Ho, Wo))
            if padding:
                p = padding
                dxp = dxp[:, :, p:-p, p:-p, p:-p]
            gx = np.ascontiguousarray(dxp)
        res = [gx, gk]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None)
        return tuple(res)

    return make_node(out, parents, bw, "conv3d")


# ---------------------------------------------------------------- normalisation

def group_norm(x: Tensor, groups: int, gain: Tensor, shift: Tensor, eps: float = GN_EPS):
    """Normalise each (sample, channel-group) to zero mean / unit variance, then affine."""
    if x.ndim < 2:
        raise DimensionError("group_norm needs at least (N, C) axes")
    N, C = x.shape[:2]
    if groups < 1 or C % groups:
        raise ConfigurationError(f"group_norm: {groups} groups do not divide {C} channels")
    if gain.shape != (C,) or shift.shape != (C,):
        raise DimensionError(f"group_norm: gain/shift must have shape ({C},)")
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    out = xhat * gain.data.reshape(bshape) + shift.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gx = gg = gs = None
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if shift.requires_grad:
            gs = g.sum(axis=red)
        if x.requires_grad:
            dxhat = (g * gain.data.reshape(bshape)).reshape(N, groups, -1)
            xh = xhat.reshape(N, groups, -1)
            m1 = dxhat.mean(axis=2, keepdims=True)
            m2 = (dxhat * xh).mean(axis=2, keepdims=True)
            gx = (inv * (dxhat - m1 - xh * m2)).reshape(x.shape)
        return gx, gg, gs

    return make_node(out, (x, gain, shift), bw, "group_norm")


# ---------------------------------------------------------------- losses

def mse_loss(pred: Tensor, target) -> Tensor:
    target = as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    d = sub(pred, target)
    return reduce_mean(mul(d, d))


def assert_finite(t: Tensor, where: str = ""):
    if not np.all(np.isfinite(t.data)):
        raise ContractError(f"non-finite values{(' in ' + where) if where else ''}")
    return t
