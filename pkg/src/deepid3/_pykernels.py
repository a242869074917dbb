"""Pure-numpy sliding-window kernels, used when the compiled core is absent.

Layouts:

* ``im2col(x[C,H,W]) -> cols[C*kh*kw, oh*ow]``, row index ``(c*kh + i)*kw + j``
* ``maxpool_forward`` returns the per-window maximum and the flat ``y*W + x``
  index of the winning input element; ties go to the lowest index.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    C, H, W = x.shape
    oh = _out_extent(H, kh, stride, pad)
    ow = _out_extent(W, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # [C, oh, ow, kh, kw] -> [C, kh, kw, oh, ow]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(C * kh * kw, oh * ow)


def col2im(cols, C, H, W, kh, kw, stride, pad):
    oh = _out_extent(H, kh, stride, pad)
    ow = _out_extent(W, kw, stride, pad)
    cols = cols.reshape(C, kh, kw, oh, ow)
    out = np.zeros((C, H + 2 * pad, W + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, i, j]
    if pad:
        out = out[:, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def maxpool_forward(x, window, stride, pad):
    C, H, W = x.shape
    oh = _out_extent(H, window, stride, pad)
    ow = _out_extent(W, window, stride, pad)
    flat_index = np.arange(H * W, dtype=np.int64).reshape(H, W)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
        flat_index = np.pad(flat_index, pad, constant_values=-1)
    win = sliding_window_view(x, (window, window), axis=(1, 2))
    win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    win = win.reshape(C, oh, ow, window * window)
    pos = np.argmax(win, axis=-1)  # first occurrence == lowest flat index
    out = np.take_along_axis(win, pos[..., None], axis=-1)[..., 0]
    iwin = sliding_window_view(flat_index, (window, window))
    iwin = iwin[: (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    iwin = iwin.reshape(oh, ow, window * window)
    idx = np.take_along_axis(np.broadcast_to(iwin, (C, oh, ow, window * window)), pos[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), np.ascontiguousarray(idx, dtype=np.int64)


def maxpool_backward(grad_out, idx, H, W):
    C = grad_out.shape[0]
    offsets = (np.arange(C, dtype=np.int64) * (H * W))[:, None, None]
    flat = np.bincount((idx + offsets).ravel(), weights=grad_out.ravel(), minlength=C * H * W)
    return flat.reshape(C, H, W)
