"""Numpy implementation of the convolution/pooling kernels.

Fallback backend used when the compiled extension is unavailable (see
kernels.py for the dispatch). Shapes follow the channel-first layout
(C, H, W); dtype of the inputs is preserved.
"""

import numpy as np

NAME = "numpy"


def conv2d_forward(x, w, stride, padding):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    # win: (C_in, Ho, Wo, kh, kw)
    y = np.einsum("ocij,chwij->ohw", w, win, optimize=True)
    return np.ascontiguousarray(y, dtype=x.dtype)


def conv2d_backward(x, w, gy, stride, padding):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    ho, wo = gy.shape[1], gy.shape[2]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    # accumulate per kernel tap; kh*kw is small (1/3/5)
    for ki in range(kh):
        for kj in range(kw):
            patch = xp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride]
            gw[:, :, ki, kj] = np.einsum("ohw,chw->oc", gy, patch, optimize=True)
            gxp[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += np.einsum(
                "oc,ohw->chw", w[:, :, ki, kj], gy, optimize=True
            )
    if padding:
        gx = gxp[:, padding : padding + h, padding : padding + wd]
    else:
        gx = gxp
    return np.ascontiguousarray(gx), gw


def maxpool2d_forward(x, window, stride, padding):
    c, h, wd = x.shape
    if padding:
        fill = -np.inf if x.dtype.kind == "f" else np.iinfo(x.dtype).min
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)), constant_values=fill)
    else:
        xp = x
    ho = (h + 2 * padding - window) // stride + 1
    wo = (wd + 2 * padding - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (window, window), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]
    flat = win.reshape(c, ho, wo, window * window)
    # np.argmax takes the first maximum, which is row-major order in the window
    local = np.argmax(flat, axis=3)
    y = np.take_along_axis(flat, local[..., None], axis=3)[..., 0]
    rows = np.arange(ho)[:, None] * stride + local // window - padding
    cols = np.arange(wo)[None, :] * stride + local % window - padding
    argmax = rows * wd + cols
    # windows fully inside the padding produce 0 with no gradient route
    dead = ~np.isfinite(y) if y.dtype.kind == "f" else np.zeros(y.shape, bool)
    if dead.any():
        y = np.where(dead, 0.0, y)
        argmax = np.where(dead, -1, argmax)
    return np.ascontiguousarray(y, dtype=x.dtype), argmax.astype(np.int64)


def maxpool2d_backward(argmax, gy, h, w):
    c = gy.shape[0]
    gx = np.zeros((c, h * w), dtype=gy.dtype)
    idx = argmax.reshape(c, -1)
    vals = gy.reshape(c, -1)
    live = idx >= 0
    for ch in range(c):
        np.add.at(gx[ch], idx[ch][live[ch]], vals[ch][live[ch]])
    return gx.reshape(c, h, w)
