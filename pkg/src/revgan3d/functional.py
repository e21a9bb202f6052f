"""Volumetric differentiable ops on N,C,D,H,W tensors."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .tensor import Tensor, record_op

_AXES = ("D", "H", "W")


def _triple(v, name):
    if np.isscalar(v):
        v = (v, v, v)
    v = tuple(int(f) for f in v)
    if len(v) != 3:
        raise ConfigError(f"{name} must have three entries, got {v}")
    return v


def _require_5d(op, x):
    if x.ndim != 5:
        raise ShapeError(f"{op}: expected an N,C,D,H,W tensor, got shape {x.shape}")


# cap on im2col column-buffer elements per chunk
COL_BUDGET = 1 << 22


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _column_chunks(xp, ksize, stride, out_sp):
    """Yield (z0, z1, cols) with cols of shape (N, Cin*k^3, (z1-z0)*Ho*Wo)."""
    n, cin = xp.shape[:2]
    do, ho, wo = out_sp
    kvol = int(np.prod(ksize))
    rows = max(1, COL_BUDGET // max(1, n * cin * kvol * ho * wo))
    win = sliding_window_view(xp, ksize, axis=(2, 3, 4))
    win = win[:, :, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    for z0 in range(0, do, rows):
        z1 = min(do, z0 + rows)
        part = win[:, :, z0 * stride:(z1 - 1) * stride + 1:stride]
        cols = part.transpose(0, 1, 5, 6, 7, 2, 3, 4).reshape(n, cin * kvol, -1)
        yield z0, z1, cols


def _conv_forward(xp, w, stride, out_sp):
    n = xp.shape[0]
    cout = w.shape[0]
    do, ho, wo = out_sp
    w2 = w.reshape(cout, -1)
    out = np.empty((n, cout, do, ho * wo), dtype=np.result_type(xp, w))
    for z0, z1, cols in _column_chunks(xp, w.shape[2:], stride, out_sp):
        out[:, :, z0:z1] = np.matmul(w2, cols).reshape(n, cout, z1 - z0, ho * wo)
    return out.reshape(n, cout, do, ho, wo)


def _conv_weight_grad(xp, w, g, stride):
    n, cout = g.shape[:2]
    do, ho, wo = g.shape[2:]
    gw = np.zeros((cout, int(np.prod(w.shape[1:]))), dtype=w.dtype)
    for z0, z1, cols in _column_chunks(xp, w.shape[2:], stride, (do, ho, wo)):
        gz = g[:, :, z0:z1].reshape(n, cout, -1)
        gw += np.tensordot(gz, cols, axes=([0, 2], [0, 2]))
    return gw.reshape(w.shape)


def _conv_input_grad(g, w, stride, xp_shape):
    """Gradient w.r.t. the padded input: correlate the dilated output gradient
    with the flipped, channel-transposed kernel."""
    n, cout = g.shape[:2]
    ks = w.shape[2:]
    if stride > 1:
        dil = np.zeros((n, cout) + tuple((o - 1) * stride + 1 for o in g.shape[2:]),
                       dtype=g.dtype)
        dil[:, :, ::stride, ::stride, ::stride] = g
        g = dil
    pads = [(0, 0), (0, 0)]
    for k, full, got in zip(ks, xp_shape[2:], g.shape[2:]):
        pads.append((k - 1, full + k - 1 - got - (k - 1)))
    gp = np.pad(g, pads)
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return _conv_forward(gp, wt, 1, xp_shape[2:])


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """3-D cross-correlation with zero padding.

    Output extent per axis is ``floor((n + 2*padding - k) / stride) + 1``.
    """
    _require_5d("conv3d", x)
    if weight.ndim != 5:
        raise ShapeError(f"conv3d: weight must be 5-D, got shape {weight.shape}")
    cin = x.shape[1]
    cout, wcin = weight.shape[:2]
    if wcin != cin:
        raise ShapeError(f"conv3d: input has {cin} channels but weight expects {wcin}")
    if stride < 1:
        raise ShapeError(f"conv3d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv3d: padding must be >= 0, got {padding}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    out_sp = []
    for ax, n, k in zip(_AXES, x.shape[2:], weight.shape[2:]):
        o = conv_output_extent(n, k, stride, padding)
        if o < 1:
            raise ShapeError(f"conv3d: extent {n} along {ax} is smaller than kernel {k} "
                             f"with padding {padding}")
        out_sp.append(o)

    xd, wd = x.data, weight.data
    pad = ((0, 0), (0, 0)) + ((padding, padding),) * 3

    def padded():
        return np.pad(xd, pad) if padding else xd

    out = _conv_forward(padded(), wd, stride, out_sp)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)

    def backward_fn(g):
        xp = padded()
        gw = _conv_weight_grad(xp, wd, g, stride)
        gx = None
        if x.requires_grad:
            gxp = _conv_input_grad(g, wd, stride, xp.shape)
            gx = gxp[:, :, padding:padding + xd.shape[2], padding:padding + xd.shape[3],
                     padding:padding + xd.shape[4]] if padding else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3, 4)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record_op("conv3d", out, parents, backward_fn, saved=(xd,))


def instance_norm3d(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (n, c) slice to zero mean / unit variance, then scale and shift."""
    _require_5d("instance_norm3d", x)
    if eps <= 0:
        raise ConfigError(f"instance_norm3d: eps must be positive, got {eps}")
    c = x.shape[1]
    if weight.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"instance_norm3d: affine parameters must have shape ({c},)")
    m = int(np.prod(x.shape[2:]))
    if m <= 1:
        raise ShapeError(f"instance_norm3d: spatial extent {x.shape[2:]} has a single voxel")
    axes = (2, 3, 4)
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = centered * inv
    gamma = weight.data.reshape(1, c, 1, 1, 1)
    out = xhat * gamma + bias.data.reshape(1, c, 1, 1, 1)

    def backward_fn(g):
        dxhat = g * gamma
        s1 = dxhat.sum(axis=axes, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
        gx = inv / m * (m * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3, 4)), g.sum(axis=(0, 2, 3, 4))

    return record_op("instance_norm3d", out, (x, weight, bias), backward_fn, saved=(xhat, inv))


def _interp_axis(a, axis, f):
    """Corner-aligned linear interpolation of `a` along `axis` by integer factor `f`.

    Returns the interpolated array and the (out x in) interpolation matrix.
    """
    n = a.shape[axis]
    n_out = n * f
    mat = np.zeros((n_out, n), dtype=a.dtype)
    if n == 1:
        mat[:, 0] = 1
        return np.repeat(a, f, axis=axis), mat
    pos = np.arange(n_out, dtype=np.float64) * (n - 1) / (n_out - 1)
    i0 = np.minimum(np.floor(pos).astype(np.intp), n - 2)
    t = (pos - i0).astype(a.dtype)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i0 + 1, axis=axis)
    bshape = [1] * a.ndim
    bshape[axis] = n_out
    out = lo + t.reshape(bshape) * (hi - lo)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), 1 - t)
    np.add.at(mat, (rows, i0 + 1), t)
    return out, mat


def upsample_trilinear(x: Tensor, factors) -> Tensor:
    """Trilinear up-sampling by integer factors with corner-aligned coordinates."""
    _require_5d("upsample_trilinear", x)
    factors = _triple(factors, "factors")
    if any(f < 1 for f in factors):
        raise ConfigError(f"upsample_trilinear: factors must be positive integers, got {factors}")
    out = x.data
    mats = []
    for axis, f in zip((2, 3, 4), factors):
        if f == 1:
            continue
        out, mat = _interp_axis(out, axis, f)
        mats.append((axis, mat))
    if not mats:
        out = out.copy()

    def backward_fn(g):
        for axis, mat in reversed(mats):
            g = np.moveaxis(np.tensordot(g, mat, axes=([axis], [0])), -1, axis)
        return (g,)

    return record_op("upsample_trilinear", out, (x,), backward_fn)


def upsample_nearest(x: Tensor, factors) -> Tensor:
    _require_5d("upsample_nearest", x)
    factors = _triple(factors, "factors")
    if any(f < 1 for f in factors):
        raise ConfigError(f"upsample_nearest: factors must be positive integers, got {factors}")
    out = x.data
    for axis, f in zip((2, 3, 4), factors):
        if f > 1:
            out = np.repeat(out, f, axis=axis)
    n, c, d, h, w = x.shape
    fz, fy, fx = factors

    def backward_fn(g):
        return (g.reshape(n, c, d, fz, h, fy, w, fx).sum(axis=(3, 5, 7)),)

    return record_op("upsample_nearest", out, (x,), backward_fn)


def avg_pool3d(x: Tensor, factors) -> Tensor:
    """Non-overlapping block mean; every extent must be divisible by its factor."""
    _require_5d("avg_pool3d", x)
    factors = _triple(factors, "factors")
    n, c, d, h, w = x.shape
    for ax, ext, f in zip(_AXES, (d, h, w), factors):
        if f < 1 or ext % f:
            raise ShapeError(f"avg_pool3d: extent {ext} along {ax} is not divisible by {f}")
    fz, fy, fx = factors
    count = fz * fy * fx
    out = x.data.reshape(n, c, d // fz, fz, h // fy, fy, w // fx, fx).mean(axis=(3, 5, 7))

    def backward_fn(g):
        gx = g / g.dtype.type(count)
        for axis, f in zip((2, 3, 4), factors):
            gx = np.repeat(gx, f, axis=axis)
        return (gx,)

    return record_op("avg_pool3d", out, (x,), backward_fn)
