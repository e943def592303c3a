"""Finite-difference validation of every differentiable surface.

Each registry entry builds small double-precision inputs from a fixed seed,
computes tape gradients of a scalar probe, then compares against central
finite differences (h = 1e-5) on a sample of coordinates.  Kink-prone ops
(activations at 0, bilinear sampling at integer coordinates, pooling ties)
are jittered away from their non-differentiable sets.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from . import losses as L
from . import tensor as T
from .networks import (ArchConfig, cnet_forward, gnet_forward, inet_embed,
                       init_model, siamese_predict, wnet_forward)
from .tensor import Tensor, ValidationError, no_grad
from .warp import bilinear_sample, compose_sampling_grid, make_grid, warp_image

H_STEP = 1e-5
_MAX_COORDS = 24


def finite_diff_check(fn, inputs: list[Tensor], seed: int = 0,
                      h: float = H_STEP, max_coords: int = _MAX_COORDS) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(*inputs)`` must return a scalar Tensor and be pure.
    """
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    grads = T.grad(out, inputs)
    T.active_tape().clear()
    worst = 0.0
    for t, g in zip(inputs, grads):
        flat = t.data.reshape(-1)
        gflat = g.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = fn(*inputs).item()
                flat[i] = orig - h
                dn = fn(*inputs).item()
            flat[i] = orig
            num = (up - dn) / (2.0 * h)
            err = abs(num - gflat[i]) / max(1.0, abs(num), abs(gflat[i]))
            worst = max(worst, err)
    return worst


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True, dtype=np.float64)


def _probe(rng, shape):
    # fixed random projection turns any output into a scalar with
    # non-uniform gradients; kept small so FD roundoff stays tiny
    r = rng.uniform(-1.0, 1.0, shape) / np.sqrt(np.prod(shape))
    return Tensor(r, dtype=np.float64)


def _jitter_away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    return Tensor(x, requires_grad=True, dtype=np.float64)


# -- registry -------------------------------------------------------------------

_TINY = ArchConfig(hr_size=32, base_width=4, upscale_width=16,
                   n_srnet_blocks=1, n_gfenet_blocks=1, fusion_interval=1,
                   n_wnet_blocks=1, critic_widths=(2, 3, 4, 5),
                   inet_embed_dim=8)


def _check_elementwise(op, seed, jitter=False):
    def run():
        rng = np.random.default_rng(seed)
        x = (_jitter_away_from_zero(rng, (3, 4)) if jitter
             else _rand(rng, (3, 4)))
        r = _probe(rng, (3, 4))
        return finite_diff_check(lambda t: T.sum_(T.mul(op(t), r)), [x], seed)
    return run


def _check_binary(op, seed, positive_second=False):
    def run():
        rng = np.random.default_rng(seed)
        a = _rand(rng, (3, 4))
        b = (_jitter_away_from_zero(rng, (3, 4)) if positive_second
             else _rand(rng, (3, 4)))
        r = _probe(rng, (3, 4))
        return finite_diff_check(lambda u, v: T.sum_(T.mul(op(u, v), r)), [a, b], seed)
    return run


def _check_matmul():
    rng = np.random.default_rng(11)
    a = _rand(rng, (3, 5))
    b = _rand(rng, (5, 2))
    r = _probe(rng, (3, 2))
    return finite_diff_check(lambda u, v: T.sum_(T.mul(T.matmul(u, v), r)), [a, b], 11)


def _check_sum_axis():
    rng = np.random.default_rng(12)
    x = _rand(rng, (2, 3, 4))
    r = _probe(rng, (2, 4))
    return finite_diff_check(lambda t: T.sum_(T.mul(T.sum_(t, axis=(1,)), r)), [x], 12)


def _check_conv(stride, padding, seed):
    def run():
        rng = np.random.default_rng(seed)
        x = _rand(rng, (2, 3, 6, 5))
        w = _rand(rng, (4, 3, 3, 3))
        b = _rand(rng, (4,))
        ho = (6 + 2 * padding - 3) // stride + 1
        wo = (5 + 2 * padding - 3) // stride + 1
        r = _probe(rng, (2, 4, ho, wo))
        return finite_diff_check(
            lambda xx, ww, bb: T.sum_(T.mul(F.conv2d(xx, ww, bb, stride, padding), r)),
            [x, w, b], seed)
    return run


def _check_conv_input_grad():
    # the adjoint as a forward op, differentiated in its own right (this is
    # the op the gradient penalty backpropagates through)
    rng = np.random.default_rng(21)
    g = _rand(rng, (2, 4, 3, 3))
    w = _rand(rng, (4, 3, 3, 3))
    r = _probe(rng, (2, 3, 6, 6))
    from .functional import _conv2d_input_grad_op
    return finite_diff_check(
        lambda gg, ww: T.sum_(T.mul(_conv2d_input_grad_op(gg, ww, (2, 3, 6, 6), 2, 1), r)),
        [g, w], 21)


def _check_conv_weight_grad():
    rng = np.random.default_rng(22)
    g = _rand(rng, (2, 4, 3, 3))
    x = _rand(rng, (2, 3, 6, 6))
    r = _probe(rng, (4, 3, 3, 3))
    from .functional import _conv2d_weight_grad_op
    return finite_diff_check(
        lambda gg, xx: T.sum_(T.mul(_conv2d_weight_grad_op(gg, xx, (4, 3, 3, 3), 2, 1), r)),
        [g, x], 22)


def _check_fc():
    rng = np.random.default_rng(13)
    x = _rand(rng, (3, 6))
    w = _rand(rng, (4, 6))
    b = _rand(rng, (4,))
    r = _probe(rng, (3, 4))
    return finite_diff_check(
        lambda xx, ww, bb: T.sum_(T.mul(F.fully_connected(xx, ww, bb), r)), [x, w, b], 13)


def _check_maxpool():
    rng = np.random.default_rng(14)
    # distinct values so FD never flips an argmax
    base = rng.permutation(2 * 3 * 6 * 6).astype(np.float64).reshape(2, 3, 6, 6)
    x = Tensor(base / base.size, requires_grad=True, dtype=np.float64)
    r = _probe(rng, (2, 3, 3, 3))
    return finite_diff_check(
        lambda t: T.sum_(T.mul(F.max_pool2d(t, 2, 2), r)), [x], 14)


def _check_pixel_shuffle():
    rng = np.random.default_rng(15)
    x = _rand(rng, (2, 8, 3, 3))
    r = _probe(rng, (2, 2, 6, 6))
    return finite_diff_check(
        lambda t: T.sum_(T.mul(F.pixel_shuffle(t, 2), r)), [x], 15)


def _check_space_to_depth():
    rng = np.random.default_rng(16)
    x = _rand(rng, (2, 2, 6, 6))
    r = _probe(rng, (2, 8, 3, 3))
    return finite_diff_check(
        lambda t: T.sum_(T.mul(F.space_to_depth(t, 2), r)), [x], 16)


def _check_concat():
    rng = np.random.default_rng(17)
    a = _rand(rng, (2, 3, 4, 4))
    b = _rand(rng, (2, 2, 4, 4))
    r = _probe(rng, (2, 5, 4, 4))
    return finite_diff_check(
        lambda u, v: T.sum_(T.mul(F.concat_depth(u, v), r)), [a, b], 17)


def _jittered_grid(rng, b, h, w):
    # land 0.25 px away from integer coordinates (kink positions)
    base = np.stack(np.meshgrid(np.arange(h, dtype=np.float64),
                                np.arange(w, dtype=np.float64), indexing="ij"))
    grid = np.broadcast_to(base, (b, 2, h, w)).copy()
    grid += 0.25 + rng.uniform(-0.15, 0.15, grid.shape)
    return Tensor(grid, requires_grad=True, dtype=np.float64)


def _check_bilinear():
    rng = np.random.default_rng(18)
    img = _rand(rng, (2, 3, 5, 5), 0.0, 1.0)
    grid = _jittered_grid(rng, 2, 5, 5)
    r = _probe(rng, (2, 3, 5, 5))
    return finite_diff_check(
        lambda im, gr: T.sum_(T.mul(bilinear_sample(im, gr), r)), [img, grid], 18)


def _check_warp():
    rng = np.random.default_rng(19)
    img = _rand(rng, (1, 3, 6, 6), 0.0, 1.0)
    flow = Tensor(rng.uniform(0.05, 0.12, (1, 2, 6, 6)), requires_grad=True,
                  dtype=np.float64)
    r = _probe(rng, (1, 3, 6, 6))
    return finite_diff_check(
        lambda im, fl: T.sum_(T.mul(warp_image(im, fl), r)), [img, flow], 19)


def _check_compose_grid():
    rng = np.random.default_rng(20)
    flow = _rand(rng, (1, 2, 4, 5), -0.3, 0.3)
    grid = make_grid(4, 5, dtype=np.float64)
    r = _probe(rng, (1, 2, 4, 5))
    return finite_diff_check(
        lambda fl: T.sum_(T.mul(compose_sampling_grid(fl, grid), r)), [flow], 20)


def _check_content_loss():
    rng = np.random.default_rng(30)
    a = _rand(rng, (2, 3, 4, 4))
    b = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)), dtype=np.float64)
    return finite_diff_check(lambda x: L.content_loss(x, b), [a], 30)


def _check_adversarial_loss():
    rng = np.random.default_rng(31)
    s = _rand(rng, (4, 1))
    return finite_diff_check(lambda x: L.adversarial_loss(x), [s], 31)


def _check_identity_loss():
    rng = np.random.default_rng(32)
    a = _rand(rng, (2, 8))
    b = _rand(rng, (2, 8))
    return finite_diff_check(lambda x, y: L.identity_loss(x, y), [a, b], 32)


def _check_bce():
    rng = np.random.default_rng(33)
    p = Tensor(rng.uniform(0.1, 0.9, (6, 1)), requires_grad=True, dtype=np.float64)
    y = (rng.uniform(0, 1, (6, 1)) > 0.5).astype(np.float64)
    return finite_diff_check(lambda x: L.bce_loss(x, y), [p], 33)


def _check_total_critic_arith():
    rng = np.random.default_rng(34)
    parts = [Tensor(rng.uniform(-1, 1, ()), requires_grad=True, dtype=np.float64)
             for _ in range(3)]
    w = L.LossWeights(lambda_adv=0.001, lambda_id=0.05, lambda_gp=10.0)
    err1 = finite_diff_check(lambda a, b, c: L.total_loss(a, b, c, w), parts, 34)
    parts2 = [Tensor(rng.uniform(-1, 1, ()), requires_grad=True, dtype=np.float64)
              for _ in range(3)]
    err2 = finite_diff_check(lambda a, b, c: L.critic_loss(a, b, c, 10.0), parts2, 35)
    return max(err1, err2)


def _tiny_bundle(seed=0):
    bundle = init_model(_TINY, seed=seed, dtype=np.float64, zero_init_outputs=False)
    return bundle, _TINY


def _check_gradient_penalty():
    # double-backward route: d(penalty)/d(critic params) against FD
    bundle, arch = _tiny_bundle(40)
    rng = np.random.default_rng(40)
    sr = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)), dtype=np.float64)
    gt = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)), dtype=np.float64)
    eps = rng.uniform(0, 1, 2)
    names = ["cnet.conv0.w", "cnet.conv1.w", "cnet.conv3.b", "cnet.fc.w"]
    inputs = [bundle.params[n] for n in names]
    return finite_diff_check(
        lambda *ps: L.gradient_penalty(sr, gt, bundle.params, arch, eps),
        inputs, 40, max_coords=4)


def _check_wnet():
    bundle, arch = _tiny_bundle(41)
    rng = np.random.default_rng(41)
    gi = Tensor(rng.uniform(-0.5, 0.5, (1, 3, 32, 32)), dtype=np.float64)
    lru = Tensor(rng.uniform(-0.5, 0.5, (1, 3, 32, 32)), dtype=np.float64)
    r = _probe(rng, (1, 2, 32, 32))
    names = ["wnet.down0.c1.w", "wnet.block0.c1.w", "wnet.adapter.w", "wnet.out.w",
             "wnet.post.b"]
    inputs = [bundle.params[n] for n in names]
    return finite_diff_check(
        lambda *ps: T.sum_(T.mul(wnet_forward(gi, lru, bundle.params, arch), r)),
        inputs, 41, max_coords=4)


def _check_gnet():
    bundle, arch = _tiny_bundle(42)
    rng = np.random.default_rng(42)
    lr = Tensor(rng.uniform(-0.5, 0.5, (1, 3, 4, 4)), dtype=np.float64)
    gw = Tensor(rng.uniform(-0.5, 0.5, (1, 3, 32, 32)), dtype=np.float64)
    r = _probe(rng, (1, 3, 32, 32))
    names = ["gnet.sr.head.w", "gnet.sr.block0.c2.w", "gnet.fuse0.w",
             "gnet.gfe.down0.c1.w", "gnet.up0.w", "gnet.out.w"]
    inputs = [bundle.params[n] for n in names]
    return finite_diff_check(
        lambda *ps: T.sum_(T.mul(gnet_forward(lr, gw, bundle.params, arch), r)),
        inputs, 42, max_coords=4)


def _check_cnet():
    bundle, arch = _tiny_bundle(43)
    rng = np.random.default_rng(43)
    img = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)), dtype=np.float64)
    names = ["cnet.conv0.w", "cnet.conv2.w", "cnet.fc.w", "cnet.fc.b"]
    inputs = [bundle.params[n] for n in names]
    return finite_diff_check(
        lambda *ps: T.mean(cnet_forward(img, bundle.params, arch)), inputs, 43,
        max_coords=4)


def _check_inet():
    bundle, arch = _tiny_bundle(44)
    rng = np.random.default_rng(44)
    img = Tensor(rng.uniform(-0.5, 0.5, (1, 3, 32, 32)), dtype=np.float64)
    r = _probe(rng, (1, arch.inet_embed_dim))
    names = ["inet.conv0_0.w", "inet.conv3_2.w", "inet.fc0.w", "inet.fc2.w"]
    inputs = [bundle.params[n] for n in names]
    return finite_diff_check(
        lambda *ps: T.sum_(T.mul(inet_embed(img, bundle.params, arch), r)),
        inputs, 44, max_coords=4)


def _check_siamese():
    bundle, arch = _tiny_bundle(45)
    rng = np.random.default_rng(45)
    x1 = Tensor(rng.uniform(-0.5, 0.5, (2, 3, 32, 32)), dtype=np.float64)
    x2 = Tensor(rng.uniform(-0.5, 0.5, (2, 3, 32, 32)), dtype=np.float64)
    y = np.array([[1.0], [0.0]])
    names = ["inet.head.w", "inet.head.b", "inet.fc1.w"]
    inputs = [bundle.params[n] for n in names]
    return finite_diff_check(
        lambda *ps: L.bce_loss(siamese_predict(x1, x2, bundle.params, arch), y),
        inputs, 45, max_coords=4)


def _check_wnet_warp_l1():
    # full Wnet -> warp -> L1 composite at the 2x2-LR micro scale.  The raw
    # flow is damped and offset 0.35 px off the integer lattice so no sample
    # point sits on a bilinear kink (where central differences are ill-posed)
    bundle, arch = _tiny_bundle(46)
    rng = np.random.default_rng(46)
    gi = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)), dtype=np.float64)
    lru = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)), dtype=np.float64)
    target = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)), dtype=np.float64)
    off = 0.35 * 2.0 / (arch.hr_size - 1)
    names = ["wnet.down1.c2.w", "wnet.out.w", "wnet.out.b", "wnet.adapter.b"]
    inputs = [bundle.params[n] for n in names]

    def fn(*ps):
        flow = wnet_forward(gi, lru, bundle.params, arch)
        flow = T.add(T.mul(flow, 0.003), off)
        return L.content_loss(warp_image(gi, flow), target)

    return finite_diff_check(fn, inputs, 46, max_coords=4)


REGISTRY: dict = {
    "add": _check_binary(T.add, 1),
    "sub": _check_binary(T.sub, 2),
    "mul": _check_binary(T.mul, 3),
    "div": _check_binary(T.div, 4, positive_second=True),
    "sqrt": _check_elementwise(lambda t: T.sqrt(T.add(T.mul(t, t), 1.0)), 5),
    "exp": _check_elementwise(T.exp, 6),
    "log": _check_elementwise(lambda t: T.log(T.add(T.mul(t, t), 1.0)), 7),
    "abs": _check_elementwise(T.abs_, 8, jitter=True),
    "sigmoid": _check_elementwise(T.sigmoid, 9),
    "relu": _check_elementwise(F.relu, 10, jitter=True),
    "leaky_relu": _check_elementwise(lambda t: F.leaky_relu(t, 0.2), 10, jitter=True),
    "matmul": _check_matmul,
    "sum_axis": _check_sum_axis,
    "conv2d": _check_conv(1, 1, 23),
    "conv2d_s2": _check_conv(2, 1, 24),
    "conv2d_k5": None,  # filled below
    "conv2d_input_grad": _check_conv_input_grad,
    "conv2d_weight_grad": _check_conv_weight_grad,
    "fully_connected": _check_fc,
    "max_pool2d": _check_maxpool,
    "pixel_shuffle": _check_pixel_shuffle,
    "space_to_depth": _check_space_to_depth,
    "concat_depth": _check_concat,
    "bilinear_sample": _check_bilinear,
    "compose_sampling_grid": _check_compose_grid,
    "warp_image": _check_warp,
    "content_loss": _check_content_loss,
    "adversarial_loss": _check_adversarial_loss,
    "identity_loss": _check_identity_loss,
    "bce_loss": _check_bce,
    "total_and_critic_loss": _check_total_critic_arith,
    "gradient_penalty": _check_gradient_penalty,
    "wnet": _check_wnet,
    "gnet": _check_gnet,
    "cnet": _check_cnet,
    "inet": _check_inet,
    "siamese": _check_siamese,
    "wnet_warp_l1": _check_wnet_warp_l1,
}


def _check_conv_k5():
    rng = np.random.default_rng(25)
    x = _rand(rng, (1, 2, 8, 8))
    w = _rand(rng, (3, 2, 5, 5))
    b = _rand(rng, (3,))
    r = _probe(rng, (1, 3, 4, 4))
    return finite_diff_check(
        lambda xx, ww, bb: T.sum_(T.mul(F.conv2d(xx, ww, bb, 2, 2), r)), [x, w, b], 25)


REGISTRY["conv2d_k5"] = _check_conv_k5


def run_gradcheck(op_name: str | None = None, tol: float = 1e-4) -> list[dict]:
    """Run one registered check or all of them; returns per-op reports."""
    if op_name is not None and op_name not in REGISTRY:
        raise ValidationError(
            f"unknown op {op_name!r}; registered ops: {sorted(REGISTRY)}")
    names = [op_name] if op_name else sorted(REGISTRY)
    reports = []
    for name in names:
        err = float(REGISTRY[name]())
        reports.append({"op": name, "max_rel_err": err, "tol": tol,
                        "passed": err < tol})
    return reports
