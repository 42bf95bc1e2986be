"""Numba-compiled convolution kernels (the hot path).

Same contracts as kernels_numpy. The inner loops run along contiguous
image rows so LLVM can vectorize them; fastmath only relicenses the
reduction order, which is fixed at compile time, so results stay
bit-reproducible run to run on one machine.

The input gradient of a cross-correlation is itself a cross-correlation
of the padded upstream with channel-swapped, flipped weights, so the
backward pass reuses the forward kernel for that piece.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True, fastmath=True)
def _corr_valid(xp, weight, bias):
    n_img, c_in, hp, wp = xp.shape
    c_out = weight.shape[0]
    k = weight.shape[2]
    h = hp - k + 1
    w = wp - k + 1
    out = np.empty((n_img, c_out, h, w), dtype=xp.dtype)
    for n in range(n_img):
        for f in range(c_out):
            for i in range(h):
                row = out[n, f, i]
                for j in range(w):
                    row[j] = bias[f]
                for c in range(c_in):
                    for u in range(k):
                        src = xp[n, c, i + u]
                        for v in range(k):
                            wv = weight[f, c, u, v]
                            for j in range(w):
                                row[j] += wv * src[j + v]
    return out


@njit(cache=True, fastmath=True)
def _weight_bias_grad(up, xp):
    n_img, c_out, h, w = up.shape
    c_in = xp.shape[1]
    k = xp.shape[2] - h + 1
    gw = np.zeros((c_out, c_in, k, k), dtype=up.dtype)
    gb = np.zeros_like(up[0, :, 0, 0])
    for f in range(c_out):
        s = gb[f]
        for n in range(n_img):
            for i in range(h):
                urow = up[n, f, i]
                for j in range(w):
                    s += urow[j]
        gb[f] = s
        for c in range(c_in):
            for u in range(k):
                for v in range(k):
                    acc = gw[f, c, u, v]
                    for n in range(n_img):
                        for i in range(h):
                            urow = up[n, f, i]
                            xrow = xp[n, c, i + u]
                            for j in range(w):
                                acc += urow[j] * xrow[j + v]
                    gw[f, c, u, v] = acc
    return gw, gb


def conv2d_forward(xp, weight, bias):
    return _corr_valid(xp, weight, bias)


def conv2d_backward(up, xp, weight):
    k = weight.shape[2]
    up_pad = np.pad(up, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    w_swap = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gx = _corr_valid(up_pad, w_swap, np.zeros(weight.shape[1], dtype=up.dtype))
    gw, gb = _weight_bias_grad(up, xp)
    return gx, gw, gb
