import math

import numpy as np
import pytest

import gwainet.tensor as T
from gwainet.losses import (LossWeights, PAPER_WEIGHTS, adversarial_loss,
                            bce_loss, content_loss, critic_loss,
                            gradient_penalty, gradient_penalty_fd,
                            identity_loss, total_loss)
from gwainet.networks import ArchConfig, init_model
from gwainet.optim import ADAM_ADVERSARIAL, ADAM_NONADVERSARIAL, Adam
from gwainet.tensor import ShapeError, Tensor, ValidationError, backward

TINY = ArchConfig(hr_size=32, base_width=4, upscale_width=16, n_srnet_blocks=1,
                  n_gfenet_blocks=1, fusion_interval=1, n_wnet_blocks=1,
                  critic_widths=(2, 3, 4, 5), inet_embed_dim=8).validate()


def test_content_loss_examples():
    a = Tensor(np.zeros((1, 3, 4, 4)))
    assert content_loss(a, a).item() == 0.0
    b = Tensor(np.full((1, 3, 4, 4), 0.5))
    assert np.isclose(content_loss(b, a).item(), 0.5)
    sr = Tensor(np.array([[[[0.0, 1.0], [-1.0, 0.5]]]]), dtype=np.float64)
    gt = Tensor(np.zeros((1, 1, 2, 2)), dtype=np.float64)
    assert np.isclose(content_loss(sr, gt).item(), 0.625)


def test_content_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        content_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))


def test_adversarial_loss_examples():
    assert adversarial_loss(Tensor(np.zeros((3, 1)))).item() == 0.0
    assert np.isclose(adversarial_loss(Tensor([[1.0], [3.0]])).item(), -2.0)
    s = Tensor(np.zeros((4, 1)), requires_grad=True, dtype=np.float64)
    backward(adversarial_loss(s))
    assert np.allclose(s.grad.data, -0.25)


def test_identity_loss_examples():
    e = Tensor(np.zeros(4096), dtype=np.float64)
    assert identity_loss(e, e).item() == 0.0
    unit = np.zeros(4096)
    unit[7] = 1.0
    assert np.isclose(identity_loss(Tensor(unit, dtype=np.float64), e).item(), 1 / 4096)
    rng = np.random.default_rng(0)
    a = Tensor(rng.standard_normal(16), dtype=np.float64)
    b = Tensor(rng.standard_normal(16), dtype=np.float64)
    assert np.isclose(identity_loss(a, b).item(), identity_loss(b, a).item())
    assert identity_loss(a, b).item() >= 0.0
    with pytest.raises(ShapeError):
        identity_loss(Tensor(np.zeros(8)), Tensor(np.zeros(9)))


def _sum_critic(x):
    return T.reshape(T.sum_(x, axis=(1, 2, 3)), (x.shape[0], 1))


def _one_hot_critic(x):
    mask = np.zeros(x.shape, dtype=np.float64)
    mask[:, 0, 1, 1] = 1.0
    return T.reshape(T.sum_(T.mul(x, Tensor(mask, dtype=x.dtype)), axis=(1, 2, 3)),
                     (x.shape[0], 1))


def test_gradient_penalty_sum_critic_closed_form():
    rng = np.random.default_rng(1)
    sr = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)), dtype=np.float64)
    gt = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)), dtype=np.float64)
    n = 3 * 4 * 4
    gp = gradient_penalty(sr, gt, None, None, rng.uniform(0, 1, 2),
                          critic_fn=_sum_critic)
    assert abs(gp.item() - (math.sqrt(n) - 1.0) ** 2) < 1e-6


def test_gradient_penalty_one_hot_critic_is_zero():
    rng = np.random.default_rng(2)
    sr = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)), dtype=np.float64)
    gt = Tensor(rng.uniform(-1, 1, (2, 3, 4, 4)), dtype=np.float64)
    gp = gradient_penalty(sr, gt, None, None, rng.uniform(0, 1, 2),
                          critic_fn=_one_hot_critic)
    assert abs(gp.item()) < 1e-6


def test_gradient_penalty_epsilon_one_interpolates_to_gt():
    seen = {}

    def spy(x):
        seen["x_hat"] = x.data.copy()
        return _sum_critic(x)

    rng = np.random.default_rng(3)
    sr = Tensor(rng.uniform(-1, 1, (1, 3, 4, 4)), dtype=np.float64)
    gt = Tensor(rng.uniform(-1, 1, (1, 3, 4, 4)), dtype=np.float64)
    gradient_penalty(sr, gt, None, None, np.array([1.0]), critic_fn=spy)
    assert np.array_equal(seen["x_hat"], gt.data)


def test_gradient_penalty_epsilon_domain():
    sr = Tensor(np.zeros((1, 3, 4, 4)))
    with pytest.raises(ValidationError):
        gradient_penalty(sr, sr, None, None, np.array([1.5]), critic_fn=_sum_critic)
    with pytest.raises(ValidationError):
        gradient_penalty(sr, sr, None, None, np.array([0.5, 0.5]),
                         critic_fn=_sum_critic)


def test_gradient_penalty_swap_invariance():
    rng = np.random.default_rng(4)
    bundle = init_model(TINY, seed=4, dtype=np.float64, zero_init_outputs=False)
    sr = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)), dtype=np.float64)
    gt = Tensor(rng.uniform(-1, 1, (2, 3, 32, 32)), dtype=np.float64)
    eps = rng.uniform(0, 1, 2)
    a = gradient_penalty(sr, gt, bundle.params, TINY, eps)
    b = gradient_penalty(gt, sr, bundle.params, TINY, 1.0 - eps)
    assert abs(a.item() - b.item()) < 1e-9


def test_gradient_penalty_matches_finite_difference_fallback():
    rng = np.random.default_rng(5)
    bundle = init_model(TINY, seed=5, dtype=np.float64, zero_init_outputs=False)
    sr = rng.uniform(-1, 1, (1, 3, 32, 32))
    gt = rng.uniform(-1, 1, (1, 3, 32, 32))
    eps = rng.uniform(0, 1, 1)
    auto = gradient_penalty(Tensor(sr), Tensor(gt), bundle.params, TINY, eps).item()
    T.active_tape().clear()
    fd = gradient_penalty_fd(sr, gt, bundle.params, TINY, eps)
    assert abs(auto - fd) < 1e-6


def test_critic_loss_arithmetic():
    assert critic_loss(1.0, 1.0, 0.3, 0.0).item() == 0.0
    assert np.isclose(critic_loss(2.0, 5.0, 0.1, 10.0).item(), -2.0)


def test_total_loss_paper_preset_arithmetic():
    w = LossWeights(lambda_adv=0.001, lambda_id=0.05)
    assert np.isclose(total_loss(Tensor(np.float64(0.2)), Tensor(np.float64(-3.0)),
                                 Tensor(np.float64(0.4)), w).item(), 0.217)
    assert np.isclose(total_loss(Tensor(np.float64(0.7)), Tensor(np.float64(9.0)),
                                 Tensor(np.float64(5.0)),
                                 LossWeights(0.0, 0.0)).item(), 0.7)


def test_total_loss_linearity_at_unit_vectors():
    w = PAPER_WEIGHTS
    units = [(1.0, 0.0, 0.0, 1.0), (0.0, 1.0, 0.0, w.lambda_adv),
             (0.0, 0.0, 1.0, w.lambda_id)]
    for lc, la, li, expected in units:
        got = total_loss(Tensor(np.float64(lc)), Tensor(np.float64(la)),
                         Tensor(np.float64(li)), w).item()
        assert np.isclose(got, expected)


def test_total_loss_gradient_splits_by_weights():
    lc = Tensor(np.float64(0.3), requires_grad=True)
    la = Tensor(np.float64(-1.0), requires_grad=True)
    li = Tensor(np.float64(0.2), requires_grad=True)
    backward(total_loss(lc, la, li, PAPER_WEIGHTS))
    assert np.isclose(lc.grad.item(), 1.0)
    assert np.isclose(la.grad.item(), 0.001)
    assert np.isclose(li.grad.item(), 0.05)


def test_paper_weights_constants():
    assert PAPER_WEIGHTS == LossWeights(lambda_adv=0.001, lambda_id=0.05,
                                        lambda_gp=10.0)


def test_bce_examples():
    p = Tensor(np.array([0.5]), dtype=np.float64)
    assert np.isclose(bce_loss(p, np.array([1.0])).item(), math.log(2.0))
    assert np.isclose(bce_loss(p, np.array([0.0])).item(), math.log(2.0))
    exact = Tensor(np.array([1.0]), dtype=np.float64)
    assert bce_loss(exact, np.array([1.0])).item() <= 1e-6
    p2 = Tensor(np.array([0.7311]), dtype=np.float64)
    assert np.isclose(bce_loss(p2, np.array([1.0])).item(), -math.log(0.7311))


def test_adam_zero_gradients_leave_params():
    p = Tensor(np.array([1.0, -2.0]), dtype=np.float64, requires_grad=True)
    p.grad = Tensor(np.zeros(2), dtype=np.float64)
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    assert opt.t == 1
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, 1.0]), dtype=np.float64, requires_grad=True)
    p.grad = Tensor(np.array([0.03, -700.0]), dtype=np.float64)
    opt = Adam({"p": p}, lr=0.01, eps=1e-12)
    opt.step()
    assert np.allclose(p.data, [1.0 - 0.01, 1.0 + 0.01], atol=1e-8)


def test_adam_presets():
    assert ADAM_NONADVERSARIAL == (1e-4, 0.9, 0.999, 1e-8)
    assert ADAM_ADVERSARIAL == (1e-4, 0.5, 0.9, 1e-8)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    p.grad = Tensor(np.zeros(4))
    with pytest.raises(ShapeError):
        Adam({"p": p}).step()


def test_critic_loss_minimization_on_separable_toy():
    # frozen generator: fixed fake/real batches with disjoint content; 100
    # critic updates strictly decrease the WGAN-GP objective
    rng = np.random.default_rng(6)
    bundle = init_model(TINY, seed=6, zero_init_outputs=False)
    crit = {k: v for k, v in bundle.params.items() if k.startswith("cnet.")}
    for name, p in bundle.params.items():
        p.requires_grad = name.startswith("cnet.")
    fake = Tensor(rng.uniform(-1.0, -0.2, (4, 3, 32, 32)).astype(np.float32))
    real = Tensor(rng.uniform(0.2, 1.0, (4, 3, 32, 32)).astype(np.float32))
    opt = Adam(crit, lr=1e-3, beta1=0.5, beta2=0.9)

    def loss_value(record=False):
        l_fake = T.mean(bce_like_score(fake))
        l_real = T.mean(bce_like_score(real))
        gp = gradient_penalty(fake, real, bundle.params, TINY,
                              rng.uniform(0, 1, 4))
        return critic_loss(l_fake, l_real, gp, 10.0)

    def bce_like_score(x):
        from gwainet.networks import cnet_forward
        return cnet_forward(x, bundle.params, TINY)

    first = None
    last = None
    for step in range(100):
        loss = loss_value()
        if first is None:
            first = loss.item()
        last = loss.item()
        backward(loss)
        opt.step()
        opt.zero_grad()
    assert last < first
