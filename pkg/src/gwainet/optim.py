"""Adam with bias correction; the only optimizer the schedules use."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor

# (lr, beta1, beta2, eps) presets from the training recipe: the adversarial
# phase switches the betas, everything else uses the defaults.
ADAM_NONADVERSARIAL = (1e-4, 0.9, 0.999, 1e-8)
ADAM_ADVERSARIAL = (1e-4, 0.5, 0.9, 1e-8)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        """One bias-corrected update; t increments once for all groups."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.data
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"adam_step: grad shape {g.shape} vs param shape {p.data.shape} ({name})")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
