"""Convolution kernels on raw numpy arrays.

Three forward paths share one output-size rule:

* ``conv2d_reference``: nested Python loops, one multiply-add at a time. Slow,
  obviously correct, and able to count every multiply-accumulate it performs.
* ``conv2d_direct``: the same accumulation order vectorised over output
  positions; bit-identical to the reference at 64-bit.
* ``conv2d_im2col``: gathers patches and calls BLAS. Fastest for dense and
  1x1 convs, equal to the reference up to summation-order rounding.
"""

from __future__ import annotations

import numpy as np


def out_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def check_conv_args(x_shape, w_shape, stride, dilation, groups, padding):
    if len(x_shape) != 4 or len(w_shape) != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x_shape} and {w_shape}")
    if stride < 1 or dilation < 1 or groups < 1 or padding < 0:
        raise ValueError("stride, dilation and groups must be >= 1 and padding >= 0")
    n, c_in, h, w = x_shape
    c_out, c_g, kh, kw = w_shape
    if c_in % groups or c_out % groups:
        raise ValueError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_g * groups != c_in:
        raise ValueError(f"weight expects {c_g * groups} input channels, input has {c_in}")
    ho = out_size(h, kh, stride, dilation, padding)
    wo = out_size(w, kw, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {x_shape} and kernel {w_shape}")
    return ho, wo


def pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def tap(xp: np.ndarray, i: int, j: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    """View of the padded input seen by kernel tap (i, j) at every output position."""
    r0, c0 = i * dilation, j * dilation
    return xp[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]


def _is_depthwise(c_in: int, c_out: int, groups: int) -> bool:
    return groups == c_in == c_out


def conv2d_reference(x, w, b=None, stride=1, dilation=1, groups=1, padding=0, count=False):
    """Direct nested-loop convolution.

    With ``count=True`` also returns ``(macs, bias_adds)``: the number of
    multiply-accumulates and bias additions actually executed. Padded taps are
    executed (and counted) like any other, which is the ideal-cost convention.
    """
    ho, wo = check_conv_args(x.shape, w.shape, stride, dilation, groups, padding)
    xp = pad(np.asarray(x, dtype=np.float64), padding)
    n, c_in = x.shape[:2]
    c_out, c_g, kh, kw = w.shape
    cog = c_out // groups
    out = np.zeros((n, c_out, ho, wo))
    macs = 0
    bias_adds = 0
    for bn in range(n):
        for o in range(c_out):
            g = o // cog
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(c_g):
                        src = g * c_g + c
                        for i in range(kh):
                            for j in range(kw):
                                acc += float(w[o, c, i, j]) * float(
                                    xp[bn, src, oy * stride + i * dilation, ox * stride + j * dilation])
                                macs += 1
                    if b is not None:
                        acc += float(b[o])
                        bias_adds += 1
                    out[bn, o, oy, ox] = acc
    if count:
        return out, (macs, bias_adds)
    return out


def conv2d_direct(x, w, b=None, stride=1, dilation=1, groups=1, padding=0):
    """Tap-accumulation convolution, same per-element operation order as the reference."""
    ho, wo = check_conv_args(x.shape, w.shape, stride, dilation, groups, padding)
    xp = pad(x, padding)
    n, c_in = x.shape[:2]
    c_out, c_g, kh, kw = w.shape
    out = np.zeros((n, c_out, ho, wo), dtype=x.dtype)
    if _is_depthwise(c_in, c_out, groups):
        for i in range(kh):
            for j in range(kw):
                out += w[:, 0, i, j][None, :, None, None] * tap(xp, i, j, stride, dilation, ho, wo)
    else:
        cog = c_out // groups
        group_of = np.arange(c_out) // cog
        for c in range(c_g):
            src = group_of * c_g + c
            for i in range(kh):
                for j in range(kw):
                    t = tap(xp, i, j, stride, dilation, ho, wo)
                    t = t[:, c:c + 1] if groups == 1 else t[:, src]
                    out += w[:, c, i, j][None, :, None, None] * t
    if b is not None:
        out += b[None, :, None, None]
    return out


def _cols(xp, kh, kw, stride, dilation, ho, wo, groups):
    """Patch matrix of shape (N, G, Cg*kh*kw, ho*wo)."""
    n, c = xp.shape[:2]
    if kh == kw == 1 and stride == 1:
        return xp.reshape(n, groups, c // groups, ho * wo)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = tap(xp, i, j, stride, dilation, ho, wo)
    return cols.reshape(n, groups, (c // groups) * kh * kw, ho * wo)


def conv2d_im2col(x, w, b=None, stride=1, dilation=1, groups=1, padding=0):
    ho, wo = check_conv_args(x.shape, w.shape, stride, dilation, groups, padding)
    xp = pad(x, padding)
    n = x.shape[0]
    c_out, c_g, kh, kw = w.shape
    cols = _cols(xp, kh, kw, stride, dilation, ho, wo, groups)
    wm = w.reshape(groups, c_out // groups, c_g * kh * kw)
    out = np.matmul(wm[None], cols).reshape(n, c_out, ho, wo)
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d_forward(x, w, b=None, stride=1, dilation=1, groups=1, padding=0, method="auto"):
    if method == "auto":
        method = "direct" if _is_depthwise(x.shape[1], w.shape[0], groups) else "im2col"
    if method == "direct":
        return conv2d_direct(x, w, b, stride, dilation, groups, padding)
    if method == "im2col":
        return conv2d_im2col(x, w, b, stride, dilation, groups, padding)
    if method == "reference":
        return conv2d_reference(x, w, b, stride, dilation, groups, padding).astype(x.dtype)
    raise ValueError(f"unknown conv method {method!r}")


def conv2d_backward(g, x, w, stride, dilation, groups, padding, need_x=True, need_w=True):
    """Gradients of a conv output w.r.t. input and weight (bias grad is ``g.sum((0, 2, 3))``)."""
    n, c_in, h, wd = x.shape
    c_out, c_g, kh, kw = w.shape
    ho, wo = g.shape[2:]
    xp = pad(x, padding)
    gx = gw = None
    if _is_depthwise(c_in, c_out, groups):
        if need_x:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j, stride, dilation, ho, wo)[...] += g * w[:, 0, i, j][None, :, None, None]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        if need_w:
            gw = np.empty_like(w)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, tap(xp, i, j, stride, dilation, ho, wo))
        return gx, gw

    cog = c_out // groups
    gm = g.reshape(n, groups, cog, ho * wo)
    if need_w:
        cols = _cols(xp, kh, kw, stride, dilation, ho, wo, groups)
        gw = np.matmul(gm, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.shape)
    if need_x:
        wm = w.reshape(groups, cog, c_g * kh * kw)
        dcols = np.matmul(wm.transpose(0, 2, 1)[None], gm)
        if kh == kw == 1 and stride == 1:
            gxp = dcols.reshape(xp.shape)
        else:
            dcols = dcols.reshape(n, c_in, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j, stride, dilation, ho, wo)[...] += dcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wd]
    return gx, gw
