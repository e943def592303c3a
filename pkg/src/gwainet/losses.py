"""Training objectives: content L1, adversarial score mean, identity
embedding distance, Wasserstein critic loss with gradient penalty, the
weighted total, and the Siamese cross-entropy used in Inet pretraining.

The gradient penalty takes the exact route: an inner ``grad`` with
create_graph through the critic (conv / LeakyReLU / linear only), so the
outer backward differentiates the penalty w.r.t. the critic parameters.  A
per-coordinate finite-difference fallback exists for cross-checking, never
for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .networks import ArchConfig, cnet_forward
from .tensor import ShapeError, Tensor, ValidationError


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 0.0
    lambda_id: float = 0.0
    lambda_gp: float = 10.0

    def validate(self) -> "LossWeights":
        if self.lambda_adv < 0 or self.lambda_id < 0 or self.lambda_gp < 0:
            raise ValidationError(f"loss weights must be >= 0, got {self}")
        return self


#: weights used for the adversarial stage in the paper's full-model runs
PAPER_WEIGHTS = LossWeights(lambda_adv=0.001, lambda_id=0.05, lambda_gp=10.0)


def content_loss(i_sr: Tensor, i_gt: Tensor) -> Tensor:
    """Mean absolute difference over all pixels and channels."""
    if i_sr.shape != i_gt.shape:
        raise ShapeError(f"content_loss shape mismatch: {i_sr.shape} vs {i_gt.shape}")
    return T.mean(T.abs_(T.sub(i_sr, i_gt)))


def adversarial_loss(critic_scores: Tensor) -> Tensor:
    """Generator-side adversarial term: minus the mean critic score."""
    return T.neg(T.mean(critic_scores))


def identity_loss(e_sr: Tensor, e_gt: Tensor) -> Tensor:
    """Squared Euclidean embedding distance over the embedding width.

    Accepts (D,) or batched (B, D); batches are averaged.
    """
    if e_sr.shape != e_gt.shape:
        raise ShapeError(f"identity_loss dim mismatch: {e_sr.shape} vs {e_gt.shape}")
    d = e_sr.shape[-1]
    diff = T.sub(e_sr, e_gt)
    sq = T.mul(diff, diff)
    if e_sr.ndim == 1:
        return T.mul(T.sum_(sq), 1.0 / d)
    return T.mean(T.mul(T.sum_(sq, axis=(1,)), 1.0 / d))


def gradient_penalty(i_sr: Tensor, i_gt: Tensor, cnet_params, arch: ArchConfig,
                     epsilon: np.ndarray, critic_fn=None) -> Tensor:
    """mean((||grad_xhat D(xhat)||_2 - 1)^2) at xhat = eps*GT + (1-eps)*SR.

    ``epsilon`` holds one U[0,1] draw per batch element.  The result is a
    recorded scalar, differentiable w.r.t. the critic parameters via
    double-backward; the interpolates themselves are treated as sampled
    points (no gradient flows into SR or GT).  ``critic_fn`` substitutes the
    critic (closed-form score functions in tests); the default is the real
    Cnet with ``cnet_params``/``arch``.
    """
    if i_sr.shape != i_gt.shape:
        raise ShapeError(f"gradient_penalty shape mismatch: {i_sr.shape} vs {i_gt.shape}")
    eps = np.asarray(epsilon, dtype=np.float64)
    b = i_sr.shape[0]
    if eps.shape != (b,):
        raise ValidationError(f"epsilon must have shape ({b},), got {eps.shape}")
    if np.any(eps < 0) or np.any(eps > 1):
        raise ValidationError("epsilon values must lie in [0, 1]")
    e = eps.reshape(b, 1, 1, 1)
    x_hat = Tensor((e * i_gt.data + (1.0 - e) * i_sr.data).astype(i_sr.dtype),
                   requires_grad=True)
    # the inner gradient needs the critic forward on the tape even when the
    # caller is evaluating under no_grad; drop those nodes again in that case
    if critic_fn is None:
        critic_fn = lambda img: cnet_forward(img, cnet_params, arch)  # noqa: E731
    ambient = T.is_grad_enabled()
    with T.enable_grad():
        mark = len(T.active_tape().nodes)
        scores = critic_fn(x_hat)
        (gx,) = T.grad(T.sum_(scores), [x_hat], create_graph=ambient)
        if not ambient:
            del T.active_tape().nodes[mark:]
    norm = T.sqrt(T.sum_(T.mul(gx, gx), axis=(1, 2, 3)))
    gap = T.add(norm, -1.0)
    return T.mean(T.mul(gap, gap))


def gradient_penalty_fd(i_sr: np.ndarray, i_gt: np.ndarray, cnet_params,
                        arch: ArchConfig, epsilon: np.ndarray,
                        h: float = 1e-5) -> float:
    """Finite-difference cross-check of the penalty value (tiny inputs only:
    it re-evaluates the critic twice per pixel)."""
    eps = np.asarray(epsilon, dtype=np.float64).reshape(-1, 1, 1, 1)
    x_hat = (eps * i_gt + (1.0 - eps) * i_sr).astype(np.float64)
    b = x_hat.shape[0]
    n = x_hat[0].size
    penalties = []
    with T.no_grad():
        for bi in range(b):
            g = np.zeros(n)
            flat = x_hat[bi].reshape(-1)
            for i in range(n):
                orig = flat[i]
                flat[i] = orig + h
                up = cnet_forward(Tensor(x_hat[bi:bi + 1]), cnet_params, arch).item()
                flat[i] = orig - h
                dn = cnet_forward(Tensor(x_hat[bi:bi + 1]), cnet_params, arch).item()
                flat[i] = orig
                g[i] = (up - dn) / (2 * h)
            penalties.append((np.linalg.norm(g) - 1.0) ** 2)
    return float(np.mean(penalties))


def critic_loss(l_fake, l_real, l_gp, lambda_gp: float) -> Tensor:
    """L_fake - L_real + lambda_gp * L_gp (all scalars)."""
    l_fake = l_fake if isinstance(l_fake, Tensor) else Tensor(np.float64(l_fake))
    l_real = l_real if isinstance(l_real, Tensor) else Tensor(np.float64(l_real))
    l_gp = l_gp if isinstance(l_gp, Tensor) else Tensor(np.float64(l_gp))
    return T.add(T.sub(l_fake, l_real), T.mul(l_gp, float(lambda_gp)))


def total_loss(l_content, l_adv, l_id, weights: LossWeights) -> Tensor:
    """L_content + lambda_adv * L_adv + lambda_id * L_id."""
    weights.validate()
    out = l_content if isinstance(l_content, Tensor) else Tensor(np.float64(l_content))
    if weights.lambda_adv != 0.0 or isinstance(l_adv, Tensor):
        l_adv = l_adv if isinstance(l_adv, Tensor) else Tensor(np.float64(l_adv))
        out = T.add(out, T.mul(l_adv, weights.lambda_adv))
    if weights.lambda_id != 0.0 or isinstance(l_id, Tensor):
        l_id = l_id if isinstance(l_id, Tensor) else Tensor(np.float64(l_id))
        out = T.add(out, T.mul(l_id, weights.lambda_id))
    return out


def bce_loss(p: Tensor, y) -> Tensor:
    """Binary cross-entropy on probabilities, clamped at 1e-7."""
    yd = np.asarray(y, dtype=np.float64)
    if yd.size != p.size:
        raise ShapeError(f"bce_loss: {p.size} probabilities vs {yd.size} labels")
    yd = yd.reshape(p.shape).astype(p.dtype)
    pc = T.clip(p, 1e-7, 1.0 - 1e-7)
    y_t = Tensor(yd)
    one_m_y = Tensor((1.0 - yd).astype(p.dtype))
    term = T.add(T.mul(y_t, T.log(pc)),
                 T.mul(one_m_y, T.log(T.add(T.neg(pc), 1.0))))
    return T.neg(T.mean(term))
