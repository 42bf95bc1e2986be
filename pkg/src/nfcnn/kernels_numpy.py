"""Pure-numpy convolution kernels.

Fallback path used when the jit backend is unavailable or disabled via
``NFCNN_BACKEND=numpy``. All arrays are NCHW; the spatial input is already
padded, so both kernels only ever see "valid" cross-correlation.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "numpy"


def conv2d_forward(xp, weight, bias):
    # xp: (N, C, H+k-1, W+k-1), weight: (F, C, k, k), bias: (F,)
    k = weight.shape[2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.einsum("nchwuv,fcuv->nfhw", win, weight, optimize=True)
    out += bias[None, :, None, None]
    return out


def conv2d_backward(up, xp, weight):
    # Returns (grad wrt padded input, grad wrt weight, grad wrt bias).
    k = weight.shape[2]
    up_pad = np.pad(up, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    win_up = sliding_window_view(up_pad, (k, k), axis=(2, 3))
    gx = np.einsum(
        "nfhwuv,fcuv->nchw", win_up, weight[:, :, ::-1, ::-1], optimize=True
    )
    win_x = sliding_window_view(xp, up.shape[2:], axis=(2, 3))
    gw = np.einsum("nfhw,ncuvhw->fcuv", up, win_x, optimize=True)
    gb = up.sum(axis=(0, 2, 3))
    return gx, gw, gb
