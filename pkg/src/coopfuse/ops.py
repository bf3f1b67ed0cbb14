"""Structured differentiable ops: convolutions, batchnorm, pooling, sampling.

Convolutions are cross-correlations with zero padding, vectorized with
sliding windows on the forward pass and small kernel-position loops on
the backward pass.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_op


def _check_geometry(extent: int, k: int, stride: int, padding: int, what: str) -> int:
    out = (extent + 2 * padding - k) // stride + 1
    if (extent + 2 * padding - k) < 0 or out < 1:
        raise ValueError(f"invalid {what} geometry: extent={extent} k={k} stride={stride} padding={padding}")
    return out


def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. x: (Cin, H, W); w: (Cout, Cin, k, k); b: (Cout,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    cout, cin, k, _ = w.shape
    if x.shape[0] != cin:
        raise ValueError(f"input channels {x.shape[0]} != weight Cin {cin}")
    if k % 2 == 0:
        raise ValueError("conv2d requires an odd kernel size")
    ho = _check_geometry(x.shape[1], k, stride, padding, "conv2d H")
    wo = _check_geometry(x.shape[2], k, stride, padding, "conv2d W")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]  # (Cin,Ho,Wo,k,k)
    out = np.einsum("ocij,cyxij->oyx", w.data, win, optimize=True) + b.data[:, None, None]

    def bwd(g):
        if w.requires_grad:
            w._accumulate(np.einsum("oyx,cyxij->ocij", g, win, optimize=True))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.einsum(
                        "oyx,oc->cyx", g, w.data[:, :, i, j], optimize=True
                    )
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    return make_op(out, (x, w, b), bwd)


def conv3d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation. x: (Cin, D, H, W); w: (Cout, Cin, k, k, k); b: (Cout,)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    cout, cin, k, _, _ = w.shape
    if x.shape[0] != cin:
        raise ValueError(f"input channels {x.shape[0]} != weight Cin {cin}")
    if k % 2 == 0:
        raise ValueError("conv3d requires an odd kernel size")
    do = _check_geometry(x.shape[1], k, stride, padding, "conv3d D")
    ho = _check_geometry(x.shape[2], k, stride, padding, "conv3d H")
    wo = _check_geometry(x.shape[3], k, stride, padding, "conv3d W")

    xp = np.pad(x.data, ((0, 0),) + ((padding, padding),) * 3)
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    out = np.einsum("ocijk,czyxijk->ozyx", w.data, win, optimize=True) + b.data[:, None, None, None]

    def bwd(g):
        if w.requires_grad:
            w._accumulate(np.einsum("ozyx,czyxijk->ocijk", g, win, optimize=True))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[
                            :,
                            i : i + stride * do : stride,
                            j : j + stride * ho : stride,
                            l : l + stride * wo : stride,
                        ] += np.einsum("ozyx,oc->czyx", g, w.data[:, :, i, j, l], optimize=True)
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding, padding:-padding]
            x._accumulate(gxp)

    return make_op(out, (x, w, b), bwd)


def conv_transpose2d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2D convolution (adjoint of conv2d in its input).

    x: (Cin, H, W); w: (Cin, Cout, k, k); b: (Cout,).
    Output extent: (in - 1) * stride - 2 * padding + k.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if stride not in (1, 2, 4):
        raise ValueError("conv_transpose2d stride must be 1, 2 or 4")
    cin, cout, k, _ = w.shape
    if x.shape[0] != cin:
        raise ValueError(f"input channels {x.shape[0]} != weight Cin {cin}")
    h, wd = x.shape[1], x.shape[2]
    ho = (h - 1) * stride - 2 * padding + k
    wo = (wd - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1:
        raise ValueError("invalid conv_transpose2d geometry")

    full = np.zeros((cout, ho + 2 * padding, wo + 2 * padding))
    for i in range(k):
        for j in range(k):
            full[:, i : i + stride * h : stride, j : j + stride * wd : stride] += np.einsum(
                "cyx,co->oyx", x.data, w.data[:, :, i, j], optimize=True
            )
    out = full[:, padding : padding + ho, padding : padding + wo] + b.data[:, None, None]

    def bwd(g):
        gp = np.pad(g, ((0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(gp, (k, k), axis=(1, 2))[:, ::stride, ::stride]  # (Cout,H,W,k,k)
        if x.requires_grad:
            x._accumulate(np.einsum("coij,oyxij->cyx", w.data, win, optimize=True))
        if w.requires_grad:
            w._accumulate(np.einsum("cyx,oyxij->coij", x.data, win, optimize=True))
        if b.requires_grad:
            b._accumulate(g.sum(axis=(1, 2)))

    return make_op(out, (x, w, b), bwd)


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    channel_axis: int = 0,
    use_input_stats: bool = False,
) -> Tensor:
    """Batch normalization over all axes except ``channel_axis``.

    In training mode, normalizes by batch statistics and updates the
    running buffers in place; in eval mode uses the running buffers.
    With ``use_input_stats`` the input's own statistics are used in both
    modes (instance-norm behavior); the running buffers are still updated
    during training only, so inference stays side-effect free.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(a for a in range(x.ndim) if a != channel_axis)
    shape = [1] * x.ndim
    shape[channel_axis] = x.shape[channel_axis]

    from_input = training or use_input_stats
    if from_input:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if training:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean, running_var

    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * invstd.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gi = gamma.data.reshape(shape) * invstd.reshape(shape)
            if from_input:
                gm = g.mean(axis=axes).reshape(shape)
                gxm = (g * xhat).mean(axis=axes).reshape(shape)
                x._accumulate(gi * (g - gm - xhat * gxm))
            else:
                x._accumulate(gi * g)

    return make_op(out, (x, gamma, beta), bwd)


def gather_rows(x, idx: np.ndarray) -> Tensor:
    """Select rows of a 2D tensor by integer index."""
    x = as_tensor(x)
    out = x.data[idx]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            x._accumulate(gx)

    return make_op(out, (x,), bwd)


def segment_max(x, offsets: np.ndarray) -> Tensor:
    """Per-segment max over rows of x (V, C) -> (S, C).

    ``offsets`` are the start indices of S contiguous, nonempty segments.
    Gradient routes to the first argmax in each segment.
    """
    x = as_tensor(x)
    if x.shape[0] == 0 or len(offsets) == 0:
        raise ValueError("segment_max on empty input")
    out = np.maximum.reduceat(x.data, offsets, axis=0)
    ends = np.append(offsets[1:], x.shape[0])
    argmax = np.empty((len(offsets), x.shape[1]), dtype=np.intp)
    for s, (a, b) in enumerate(zip(offsets, ends)):
        argmax[s] = a + np.argmax(x.data[a:b], axis=0)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            cols = np.arange(x.shape[1])
            for s in range(len(offsets)):
                gx[argmax[s], cols] += g[s]
            x._accumulate(gx)

    return make_op(out, (x,), bwd)


def reduce_max_axis0(x, count: int) -> Tensor:
    """Elementwise max over the first ``count`` axis-0 slices, keepdims."""
    x = as_tensor(x)
    if count < 1 or count > x.shape[0]:
        raise ValueError(f"count {count} out of range for axis extent {x.shape[0]}")
    valid = x.data[:count]
    out = valid.max(axis=0, keepdims=True)
    argmax = valid.argmax(axis=0)  # first argmax on ties

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx[:count], argmax[None], g, axis=0)
            x._accumulate(gx)

    return make_op(out, (x,), bwd)


def reduce_mean_axis0(x, count: int) -> Tensor:
    """Elementwise mean over the first ``count`` axis-0 slices, keepdims."""
    x = as_tensor(x)
    if count < 1 or count > x.shape[0]:
        raise ValueError(f"count {count} out of range for axis extent {x.shape[0]}")
    out = x.data[:count].mean(axis=0, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:count] = g / count
            x._accumulate(gx)

    return make_op(out, (x,), bwd)


def global_pool3d(x, kind: str) -> Tensor:
    """Reduce each axis-0 slot of (n, C, H, W) to one scalar -> (n, 1, 1, 1)."""
    x = as_tensor(x)
    if x.size == 0:
        raise ValueError("global_pool3d on empty tensor")
    n = x.shape[0]
    flat = x.data.reshape(n, -1)
    if kind == "max":
        out = flat.max(axis=1).reshape(n, 1, 1, 1)
        argmax = flat.argmax(axis=1)

        def bwd(g):
            if x.requires_grad:
                gx = np.zeros_like(flat)
                gx[np.arange(n), argmax] = g.reshape(n)
                x._accumulate(gx.reshape(x.shape))

    elif kind == "avg":
        out = flat.mean(axis=1).reshape(n, 1, 1, 1)

        def bwd(g):
            if x.requires_grad:
                gx = np.broadcast_to(g.reshape(n, 1) / flat.shape[1], flat.shape)
                x._accumulate(gx.reshape(x.shape))

    else:
        raise ValueError(f"unknown pool kind {kind!r}")

    return make_op(out, (x,), bwd)


def broadcast_mul(x, w) -> Tensor:
    """Scale each axis-0 slot of x (n, C, H, W) by w (n, 1, 1, 1)."""
    from .tensor import mul

    x, w = as_tensor(x), as_tensor(w)
    if w.shape != (x.shape[0], 1, 1, 1):
        raise ValueError(f"broadcast_mul weight shape {w.shape} incompatible with {x.shape}")
    return mul(x, w)


def bilinear_sample(fmap, sx: np.ndarray, sy: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map at fractional grid coordinates, zero outside.

    ``sx``/``sy`` give, per output cell of the same (H, W) layout, the
    source coordinates in index units (axis 1 and axis 2 respectively).
    Differentiable with respect to the map values only. Coordinates
    within 1e-9 of an integer are snapped so exact-identity and exact
    one-cell-shift transforms reproduce the input bit-for-bit.
    """
    fmap = as_tensor(fmap)
    c, h, w = fmap.shape
    sx = np.where(np.abs(sx - np.round(sx)) < 1e-9, np.round(sx), sx)
    sy = np.where(np.abs(sy - np.round(sy)) < 1e-9, np.round(sy), sy)

    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros((c,) + sx.shape)
    corners = []
    for dx, wx in ((0, 1.0 - fx), (1, fx)):
        for dy, wy in ((0, 1.0 - fy), (1, fy)):
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < h) & (yi >= 0) & (yi < w)
            wgt = wx * wy * inb
            xi_c = np.clip(xi, 0, h - 1)
            yi_c = np.clip(yi, 0, w - 1)
            out += wgt * fmap.data[:, xi_c, yi_c]
            corners.append((xi_c, yi_c, wgt))

    def bwd(g):
        if fmap.requires_grad:
            gx = np.zeros_like(fmap.data)
            for xi_c, yi_c, wgt in corners:
                np.add.at(gx, (slice(None), xi_c, yi_c), g * wgt)
            fmap._accumulate(gx)

    return make_op(out, (fmap,), bwd)
