"""Naive quadruple-loop convolution, the oracle both fast paths are checked
against.  Never used in training; kept deliberately dumb."""

import numpy as np


def conv2d_naive(x, w, stride=1, padding=0):
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = w.shape
    assert Cin == Cin_w
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = x.dtype.type(0)
                    for ci in range(Cin):
                        for p in range(kh):
                            ih = i * stride + p - padding
                            if ih < 0 or ih >= H:
                                continue
                            for q in range(kw):
                                iw = j * stride + q - padding
                                if iw < 0 or iw >= W:
                                    continue
                                acc += x[b, ci, ih, iw] * w[co, ci, p, q]
                    out[b, co, i, j] = acc
    return out
