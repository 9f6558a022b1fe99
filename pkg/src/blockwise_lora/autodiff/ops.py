"""Differentiable primitives.

Shapes must match exactly; the only implicit broadcast is scalar-with-tensor.
Per-channel additions go through the explicit ``add_channel`` and bias
arguments of ``linear``/``conv2d``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from ..errors import ContractError, ShapeError
from .tensor import Tensor, make_result


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_dtype(op: str, *ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ContractError(f"{op}: dtype mismatch {ts[0].dtype} vs {t.dtype}")


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = _t(a)
        return make_result(a.data + a.dtype.type(b), (a,), lambda g: (g,), "add")
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = _t(a), _t(b)
    _same_shape("add", a, b)
    _same_dtype("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    a, b = _t(a), _t(b)
    _same_shape("sub", a, b)
    _same_dtype("sub", a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    a, b = _t(a), _t(b)
    _same_shape("mul", a, b)
    _same_dtype("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd if a.requires_grad else None, g * ad if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward, "mul")


def scale(a, s: float) -> Tensor:
    a = _t(a)
    s_ = a.dtype.type(s)
    return make_result(a.data * s_, (a,), lambda g: (g * s_,), "scale")


def silu(x) -> Tensor:
    x = _t(x)
    xd = x.data
    sig = 1.0 / (1.0 + np.exp(-xd))
    out = xd * sig

    def backward(g):
        return (g * (sig * (1.0 + xd * (1.0 - sig))),)

    return make_result(out, (x,), backward, "silu")


def square(x) -> Tensor:
    x = _t(x)
    xd = x.data
    return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# --------------------------------------------------------------------------- reductions & shape


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _t(x)
    shape, dtype = x.shape, x.dtype
    return make_result(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def mean(x) -> Tensor:
    x = _t(x)
    n = x.data.size
    shape, dtype = x.shape, x.dtype
    return make_result(
        np.asarray(x.data.mean(), dtype=dtype), (x,), lambda g: (np.full(shape, g / n, dtype=dtype),), "mean"
    )


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _t(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from exc
    return make_result(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = _t(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default); all other extents must agree."""
    ts = [_t(t) for t in tensors]
    if not ts:
        raise ContractError("concat: no inputs")
    _same_dtype("concat", *ts)
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis):
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


def take_batch(x, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of the leading (batch) axis."""
    x = _t(x)
    shape, dtype = x.shape, x.dtype
    if not 0 <= start <= stop <= shape[0]:
        raise ShapeError(f"take_batch: range {start}:{stop} outside batch of {shape[0]}")

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[start:stop] = g
        return (full,)

    return make_result(np.ascontiguousarray(x.data[start:stop]), (x,), backward, "take_batch")


# --------------------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """2-D @ 2-D, or batched 3-D @ 3-D with equal batch extents."""
    a, b = _t(a), _t(b)
    _same_dtype("matmul", a, b)
    ok = (a.ndim == b.ndim == 2 and a.shape[1] == b.shape[0]) or (
        a.ndim == b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1]
    )
    if not ok:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; weight is (out, in)."""
    x, weight = _t(x), _t(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    parents = [x, weight]
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
        parents.append(bias)
    _same_dtype("linear", *parents)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return grads

    return make_result(out.reshape(*lead, wd.shape[0]), parents, backward, "linear")


# --------------------------------------------------------------------------- convolution


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over NCHW input with zero padding. weight is (O, C, kh, kw)."""
    x, weight = _t(x), _t(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    parents = [x, weight]
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
        parents.append(bias)
    _same_dtype("conv2d", *parents)
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    wmat = weight.data.reshape(o, c * kh * kw)

    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, c, h * w)
        out = np.matmul(wmat, cols)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        xp = np.ascontiguousarray(xp)
        s0, s1, s2, s3 = xp.strides
        win = as_strided(
            xp, (n, c, kh, kw, ho, wo), (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False
        )
        cols = win.reshape(n, c * kh * kw, ho * wo)
        out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g3 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.einsum("nok,nck->oc", g3, cols, optimize=True).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g3.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3)
            if kh == kw == 1 and stride == 1 and padding == 0:
                gx = gcols.reshape(n, c, h, w)
            else:
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
                gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    return make_result(out, parents, backward, "conv2d")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = _t(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest")


def add_channel(x, v) -> Tensor:
    """Add a (B, C) tensor to every spatial position of a (B, C, H, W) tensor."""
    x, v = _t(x), _t(v)
    if x.ndim != 4 or v.shape != x.shape[:2]:
        raise ShapeError(f"add_channel: shapes {x.shape} and {v.shape} do not conform")
    _same_dtype("add_channel", x, v)
    return make_result(x.data + v.data[:, :, None, None], (x, v), lambda g: (g, g.sum(axis=(2, 3))), "add_channel")


# --------------------------------------------------------------------------- normalization / attention


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    n, c = x.shape[:2]
    if c % groups or gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: input {x.shape}, groups {groups}, affine {gamma.shape}/{beta.shape}")
    _same_dtype("group_norm", x, gamma, beta)
    spatial = x.shape[2:]
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, c) + (1,) * len(spatial)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gbeta = g.sum(axis=axes)
        if x.requires_grad:
            gxh = (g * gamma.data.reshape(bshape)).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xh * (gxh * xh).mean(axis=-1, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "group_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = _t(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def attention(q, k, v) -> Tensor:
    """softmax(q kᵀ / √d) v over full sequences; q (B, Lq, d), k (B, Lk, d), v (B, Lk, dv)."""
    q, k, v = _t(q), _t(k), _t(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3 or q.shape[2] != k.shape[2] or k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[2]))
    return matmul(softmax(scores, axis=-1), v)


def mse(pred, target, weights=None) -> Tensor:
    """Mean squared error.

    With ``weights`` (one per batch row) the result is
    ``sum_i weights[i] * mean((pred[i] - target[i])**2)``.
    """
    pred, target = _t(pred), _t(target)
    _same_shape("mse", pred, target)
    _same_dtype("mse", pred, target)
    diff = pred.data - target.data
    if weights is None:
        n = diff.size
        value = np.asarray((diff * diff).sum() / n, dtype=diff.dtype)
        coef = np.asarray(2.0 / n, dtype=diff.dtype)
    else:
        w = np.asarray(weights, dtype=diff.dtype)
        if w.shape != (pred.shape[0],):
            raise ShapeError(f"mse: weights {w.shape} do not match batch {pred.shape[0]}")
        per = diff.reshape(diff.shape[0], -1)
        m = per.shape[1]
        value = np.asarray((w * (per * per).sum(axis=1) / m).sum(), dtype=diff.dtype)
        coef = (2.0 * w / m).reshape((-1,) + (1,) * (diff.ndim - 1)).astype(diff.dtype)

    def backward(g):
        gd = g * coef * diff
        return (gd if pred.requires_grad else None, -gd if target.requires_grad else None)

    return make_result(value, (pred, target), backward, "mse")


def timestep_embedding(t, dim: int, max_period: float = 10000.0, dtype=np.float32) -> Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps: [cos | sin], shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return Tensor(emb.astype(dtype))
