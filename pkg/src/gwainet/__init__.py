"""Exemplar-guided 8x face super-resolution, self-contained on CPU.

Subpackages: tensor (autodiff core), kernels (conv backends), functional
(layer primitives), warp (flow-field sampling), networks (the four
subnetworks), losses, optim, synthdata (procedural faces), checkpoint,
training (stages, PSNR evaluation), gradcheck, cli.
"""

from .tensor import (GwaiError, ShapeError, Tape, Tensor, ValidationError,
                     backward, grad, no_grad, set_debug)

__version__ = "0.1.0"

__all__ = [
    "GwaiError", "ShapeError", "Tape", "Tensor", "ValidationError",
    "backward", "grad", "no_grad", "set_debug", "__version__",
]
