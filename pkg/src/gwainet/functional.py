"""Network-level primitives: convolution, pooling, activations, pixel
shuffle, fully-connected and the (tape-free) bicubic resizer.

conv2d and its two adjoints are registered as first-class primitives whose
backward rules reference each other, which is what makes the critic graph
twice differentiable for the WGAN-GP penalty.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import kernels
from .tensor import (ShapeError, Tensor, add_channel_bias, add_row_bias,
                     apply_op, concat, matmul, mul, transpose2d)


# -- convolution ------------------------------------------------------------

def _conv_checks(x: Tensor, weight: Tensor, stride: int, padding: int):
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} and {weight.shape}")
    Cout, Cin, kh, kw = weight.shape
    if x.shape[1] != Cin:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} has Cin={x.shape[1]} "
            f"but weight shape {weight.shape} expects Cin={Cin}")
    if kh < 1 or kw < 1 or kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"conv2d kernel {kh}x{kw} does not fit input {x.shape} "
                         f"with padding {padding}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if x.dtype != weight.dtype:
        raise ShapeError(f"conv2d dtypes differ: {x.dtype} vs {weight.dtype}")


def conv2d_raw(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation without bias; gradient w.r.t. both operands."""
    _conv_checks(x, weight, stride, padding)
    data = kernels.conv2d_forward(x.data, weight.data, stride, padding)
    x_shape, w_shape = x.shape, weight.shape

    def vjp(g, needs):
        gx = _conv2d_input_grad_op(g, weight, x_shape, stride, padding) if needs[0] else None
        gw = _conv2d_weight_grad_op(g, x, w_shape, stride, padding) if needs[1] else None
        return [gx, gw]

    return apply_op("conv2d", (x, weight), data, vjp)


def _conv2d_input_grad_op(g: Tensor, weight: Tensor, x_shape, stride, padding) -> Tensor:
    data = kernels.conv2d_input_grad(g.data, weight.data, x_shape, stride, padding)

    def vjp(u, needs):
        gg = conv2d_raw(u, weight, stride, padding) if needs[0] else None
        gw = _conv2d_weight_grad_op(g, u, weight.shape, stride, padding) if needs[1] else None
        return [gg, gw]

    return apply_op("conv2d_input_grad", (g, weight), data, vjp)


def _conv2d_weight_grad_op(g: Tensor, x: Tensor, w_shape, stride, padding) -> Tensor:
    data = kernels.conv2d_weight_grad(g.data, x.data, w_shape, stride, padding)

    def vjp(v, needs):
        gg = conv2d_raw(x, v, stride, padding) if needs[0] else None
        gx = _conv2d_input_grad_op(g, v, x.shape, stride, padding) if needs[1] else None
        return [gg, gx]

    return apply_op("conv2d_weight_grad", (g, x), data, vjp)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    out = conv2d_raw(x, weight, stride, padding)
    if bias is not None:
        out = add_channel_bias(out, bias)
    return out


# -- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    from .tensor import lrelu
    return lrelu(x, 0.0)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ShapeError(f"leaky_relu alpha must be in (0, 1), got {alpha}")
    from .tensor import lrelu
    return lrelu(x, alpha)


# -- pooling ------------------------------------------------------------------

def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max pooling; backward routes to the first argmax in each window."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ShapeError(f"max_pool2d window {k} exceeds input {H}x{W}")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    s0, s1, s2, s3 = x.data.strides
    win = as_strided(x.data, (B, C, Ho, Wo, k, k),
                     (s0, s1, s2 * stride, s3 * stride, s2, s3))
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)                       # first occurrence on ties
    data = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    # flat input index of each window maximum
    ii = (np.arange(Ho) * stride)[:, None] + np.zeros(Wo, np.intp)
    jj = (np.arange(Wo) * stride)[None, :] + np.zeros((Ho, 1), np.intp)
    src_i = ii[None, None] + arg // k
    src_j = jj[None, None] + arg % k
    bidx = np.arange(B)[:, None, None, None]
    cidx = np.arange(C)[None, :, None, None]
    flat_idx = (((bidx * C + cidx) * H + src_i) * W + src_j).ravel()

    def vjp(g, needs):
        return [_pool_scatter(g, flat_idx, x.shape)]

    return apply_op("max_pool2d", (x,), np.ascontiguousarray(data), vjp)


def _pool_scatter(g: Tensor, flat_idx: np.ndarray, x_shape) -> Tensor:
    n = int(np.prod(x_shape))
    data = np.bincount(flat_idx, weights=g.data.ravel().astype(np.float64),
                       minlength=n).astype(g.dtype).reshape(x_shape)

    def vjp(u, needs):
        return [_pool_gather(u, flat_idx, g.shape)]

    return apply_op("pool_scatter", (g,), data, vjp)


def _pool_gather(u: Tensor, flat_idx: np.ndarray, g_shape) -> Tensor:
    data = u.data.ravel()[flat_idx].reshape(g_shape)

    def vjp(v, needs):
        return [_pool_scatter(v, flat_idx, u.shape)]

    return apply_op("pool_gather", (u,), data, vjp)


# -- pixel shuffle ------------------------------------------------------------

def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r^2, H, W) -> (B, C, rH, rW); exact inverse of space_to_depth."""
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle expects 4-D input, got {x.shape}")
    B, Cr2, H, W = x.shape
    if Cr2 % (r * r) != 0:
        raise ShapeError(f"pixel_shuffle: {Cr2} channels not divisible by r^2={r * r}")
    C = Cr2 // (r * r)
    data = (x.data.reshape(B, C, r, r, H, W)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(B, C, H * r, W * r))

    def vjp(g, needs):
        return [space_to_depth(g, r)]

    return apply_op("pixel_shuffle", (x,), np.ascontiguousarray(data), vjp)


def space_to_depth(x: Tensor, r: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"space_to_depth expects 4-D input, got {x.shape}")
    B, C, Hr, Wr = x.shape
    if Hr % r != 0 or Wr % r != 0:
        raise ShapeError(f"space_to_depth: spatial {Hr}x{Wr} not divisible by {r}")
    H, W = Hr // r, Wr // r
    data = (x.data.reshape(B, C, H, r, W, r)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(B, C * r * r, H, W))

    def vjp(g, needs):
        return [pixel_shuffle(g, r)]

    return apply_op("space_to_depth", (x,), np.ascontiguousarray(data), vjp)


# -- concatenation / linear ----------------------------------------------------

def concat_depth(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat_depth expects 4-D inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_depth batch/spatial mismatch: {a.shape} vs {b.shape}")
    return concat([a, b], axis=1)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ W.T + b with x:(B,N), W:(M,N), b:(M,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"fully_connected expects matrices, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"fully_connected length mismatch: input {x.shape} vs weight {weight.shape}")
    return add_row_bias(matmul(x, transpose2d(weight)), bias)


def flatten(x: Tensor) -> Tensor:
    return x.reshape((x.shape[0], int(np.prod(x.shape[1:]))))


# -- bicubic resize (data pipeline only, never on the tape) --------------------

def cubic_kernel(t, a: float = -0.5):
    """Catmull-Rom cubic; interpolating (1 at 0, 0 at other integers)."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    m1 = t <= 1
    out[m1] = (a + 2) * t[m1] ** 3 - (a + 3) * t[m1] ** 2 + 1
    m2 = (t > 1) & (t < 2)
    out[m2] = a * (t[m2] ** 3 - 5 * t[m2] ** 2 + 8 * t[m2] - 4)
    return out


@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix of half-pixel-centred Catmull-Rom weights
    with edge-clamped taps folded into the boundary columns."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = (d + 0.5) * scale - 0.5
        base = int(np.floor(src))
        f = src - base
        taps = [base - 1, base, base + 1, base + 2]
        wts = cubic_kernel([f + 1, f, 1 - f, 2 - f])
        for tp, wt in zip(taps, wts):
            mat[d, min(max(tp, 0), n_in - 1)] += wt
    return mat


def bicubic_resize(img, out_h: int, out_w: int):
    """Separable Catmull-Rom resize of (..., H, W); returns the same kind
    (Tensor in -> Tensor out, never tracked)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bicubic_resize target must be >= 1, got {out_h}x{out_w}")
    is_tensor = isinstance(img, Tensor)
    data = img.data if is_tensor else np.asarray(img)
    H, W = data.shape[-2], data.shape[-1]
    ky = _resize_matrix(H, out_h).astype(data.dtype)
    kx = _resize_matrix(W, out_w).astype(data.dtype)
    out = np.tensordot(data, ky.T, axes=([-2], [0]))   # (..., W, out_h)
    out = np.tensordot(out, kx.T, axes=([-2], [0]))    # (..., out_h, out_w)
    out = np.ascontiguousarray(out)
    return Tensor(out) if is_tensor else out
