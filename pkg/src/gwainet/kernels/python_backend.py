"""Pure-numpy convolution kernels (im2col + BLAS matmul)."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_hw(H, W, kh, kw, stride, padding):
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    return Ho, Wo


def _im2col(x, kh, kw, stride, padding):
    """(B, Cin, H, W) -> (B*Ho*Wo, Cin*kh*kw) patch matrix."""
    B, Cin, H, W = x.shape
    Ho, Wo = _out_hw(H, W, kh, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        shape=(B, Ho, Wo, Cin, kh, kw),
        strides=(s0, s2 * stride, s3 * stride, s1, s2, s3),
    )
    return win.reshape(B * Ho * Wo, Cin * kh * kw), Ho, Wo


def conv2d_forward(x, w, stride, padding):
    B = x.shape[0]
    Cout, Cin, kh, kw = w.shape
    col, Ho, Wo = _im2col(x, kh, kw, stride, padding)
    y = col @ w.reshape(Cout, -1).T
    return np.ascontiguousarray(y.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2))


def conv2d_input_grad(g, w, x_shape, stride, padding):
    B, Cin, H, W = x_shape
    Cout, _, kh, kw = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
    gcol = gmat @ w.reshape(Cout, -1)           # (B*Ho*Wo, Cin*kh*kw)
    gcol = gcol.reshape(B, Ho, Wo, Cin, kh, kw)
    Hp, Wp = H + 2 * padding, W + 2 * padding
    gx = np.zeros((B, Cin, Hp, Wp), dtype=g.dtype)
    for p in range(kh):
        for q in range(kw):
            gx[:, :, p:p + stride * Ho:stride, q:q + stride * Wo:stride] += \
                gcol[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(gx)


def conv2d_weight_grad(g, x, w_shape, stride, padding):
    Cout, Cin, kh, kw = w_shape
    col, Ho, Wo = _im2col(x, kh, kw, stride, padding)
    gmat = g.transpose(0, 2, 3, 1).reshape(-1, Cout)
    return np.ascontiguousarray((gmat.T @ col).reshape(w_shape))
