"""Flow-field warping: normalized grid, sampling-grid composition and
bilinear sampling with exact sub-gradients w.r.t. both the flow and the
sampled image.

Conventions (fixed here, relied on everywhere):
  * flow channel 0 moves vertically (rows), channel 1 horizontally (cols);
  * grid coordinates are normalized so the top-left pixel is (-1,-1) and
    the bottom-right (+1,+1);
  * sampling reads *from* the guide at the composed location (gather);
  * taps outside the image contribute zero (implicit zero padding);
  * at integer coordinates the sub-gradient of the hinge weights is taken
    from the left cell.
"""

from __future__ import annotations

import numpy as np

from .tensor import (GwaiError, ShapeError, Tensor, add, apply_op, expand_to,
                     is_grad_enabled, mul)


def make_grid(h: int, w: int, dtype=np.float32) -> Tensor:
    """Normalized pixel grid delta: (2, h, w), constant, never on the tape."""
    if h < 2 or w < 2:
        raise ShapeError(f"make_grid needs h, w >= 2, got {h}x{w}")
    rows = 2.0 * np.arange(h, dtype=np.float64) / (h - 1) - 1.0
    cols = 2.0 * np.arange(w, dtype=np.float64) / (w - 1) - 1.0
    delta = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=0)
    return Tensor(delta.astype(dtype))


def compose_sampling_grid(flow: Tensor, grid: Tensor) -> Tensor:
    """rho = flow + delta, rescaled to pixel units per axis.

    Output channel 0 holds row coordinates in [0, H-1] when the flow is
    zero; the gradient w.r.t. the flow is the constant rescale Jacobian
    ((H-1)/2, (W-1)/2).
    """
    if flow.ndim != 4 or flow.shape[1] != 2:
        raise ShapeError(f"flow must be (B, 2, H, W), got {flow.shape}")
    if grid.shape != flow.shape[1:]:
        raise ShapeError(f"grid shape {grid.shape} does not match flow {flow.shape}")
    if grid.data[0, 0, 0] != -1.0 or grid.data[1, 0, 0] != -1.0 \
            or grid.data[0, -1, -1] != 1.0 or grid.data[1, -1, -1] != 1.0:
        raise ShapeError("grid is not a normalized [-1,1] pixel grid")
    B, _, H, W = flow.shape
    # (flow + delta + 1) * s computed as flow * s + (delta + 1) * s: the
    # second term is (delta + 1) * s evaluated in closed form, i.e. the
    # exact integer lattice, so a zero flow lands on pixel centers
    # bit-exactly
    scale = np.empty((2, H, W), dtype=flow.dtype)
    scale[0] = (H - 1) / 2.0
    scale[1] = (W - 1) / 2.0
    base = np.stack(np.meshgrid(np.arange(H, dtype=flow.dtype),
                                np.arange(W, dtype=flow.dtype), indexing="ij"))
    scale_t = expand_to(Tensor(scale), flow.shape, axis=(0,))
    base_t = expand_to(Tensor(base), flow.shape, axis=(0,))
    return add(mul(flow, scale_t), base_t)


def bilinear_sample(img: Tensor, grid_px: Tensor) -> Tensor:
    """Sample img:(B,C,H,W) at pixel coordinates grid_px:(B,2,H,W).

    out(b,c,i,j) = sum over the 4 surrounding integer taps of
    img * max(0, 1-|drow|) * max(0, 1-|dcol|); missing taps contribute 0.
    First-order gradients only (the critic never sees this op).
    """
    if img.ndim != 4 or grid_px.ndim != 4 or grid_px.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: img {img.shape}, grid {grid_px.shape}")
    if img.shape[0] != grid_px.shape[0] or img.shape[2:] != grid_px.shape[2:]:
        raise ShapeError(
            f"bilinear_sample batch/spatial mismatch: img {img.shape} vs grid {grid_px.shape}")
    from .tensor import _state  # debug flag lives with the tape state
    if _state.debug and not np.all(np.isfinite(grid_px.data)):
        raise GwaiError("debug: NaN/Inf in sampling grid")

    B, C, H, W = img.shape
    rows = grid_px.data[:, 0].astype(np.float64)
    cols = grid_px.data[:, 1].astype(np.float64)
    # left-cell base: ceil(x) - 1 puts integer coordinates at the right edge
    # of their cell, realizing the left-sided sub-gradient at the kinks
    r0 = np.ceil(rows).astype(np.int64) - 1
    c0 = np.ceil(cols).astype(np.int64) - 1

    bidx = np.arange(B)[:, None, None]
    taps = []
    out = np.zeros((B, C, H, W), dtype=img.dtype)
    for dr in (0, 1):
        for dc in (0, 1):
            ri = r0 + dr
            ci = c0 + dc
            wr = 1.0 - np.abs(rows - ri)
            wc = 1.0 - np.abs(cols - ci)
            inside = (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
            wgt = wr * wc * inside
            rc = np.clip(ri, 0, H - 1)
            cc = np.clip(ci, 0, W - 1)
            val = np.moveaxis(img.data[bidx, :, rc, cc], -1, 1)   # (B,C,H,W)
            out += (val * wgt[:, None]).astype(img.dtype)
            taps.append((dr, dc, rc, cc, wr, wc, wgt, inside, val))

    def vjp(g, needs):
        if is_grad_enabled():
            raise GwaiError("bilinear_sample does not support second-order gradients")
        g_img = None
        g_grid = None
        gd = g.data
        ch = np.arange(C)[None, :, None, None]
        bb = np.arange(B)[:, None, None, None]
        if needs[0]:
            acc = np.zeros(B * C * H * W, dtype=np.float64)
            for (_, _, rc, cc, _, _, wgt, _, _) in taps:
                idx = ((bb * C + ch) * H + rc[:, None]) * W + cc[:, None]
                acc += np.bincount(idx.ravel(),
                                   weights=(gd * wgt[:, None]).ravel(),
                                   minlength=B * C * H * W)
            g_img = Tensor(acc.reshape(B, C, H, W).astype(img.dtype))
        if needs[1]:
            # within the chosen cell the hinge weights are linear: slope -1
            # for the low tap, +1 for the high tap
            grow = np.zeros((B, H, W), dtype=np.float64)
            gcol = np.zeros((B, H, W), dtype=np.float64)
            for (dr, dc, _, _, wr, wc, _, inside, val) in taps:
                gsum = (gd * val).sum(axis=1)                     # (B,H,W)
                grow += gsum * (1.0 if dr else -1.0) * wc * inside
                gcol += gsum * wr * (1.0 if dc else -1.0) * inside
            g_grid = Tensor(np.stack([grow, gcol], axis=1).astype(grid_px.dtype))
        return [g_img, g_grid]

    return apply_op("bilinear_sample", (img, grid_px), out, vjp)


def warp_image(guide: Tensor, flow: Tensor) -> Tensor:
    """Warped guide I_GW = bilinear_sample(guide, compose(flow, delta))."""
    if guide.shape[2:] != flow.shape[2:]:
        raise ShapeError(
            f"warp_image spatial mismatch: guide {guide.shape} vs flow {flow.shape}")
    grid = make_grid(guide.shape[2], guide.shape[3], dtype=guide.dtype)
    return bilinear_sample(guide, compose_sampling_grid(flow, grid))
