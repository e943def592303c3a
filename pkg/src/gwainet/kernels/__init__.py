"""Hot convolution kernels, compiled when possible.

The inner conv loops dominate CPU training time, so they exist twice: a
Cython extension (``_ckernels``) and a pure-numpy im2col fallback with
identical semantics.  The backend is selected at import from the
``GWAI_KERNELS`` environment variable (``auto`` | ``cython`` | ``python``)
and can be switched at runtime with :func:`set_backend`, e.g. by the
benchmark in ``benchmarks/bench_kernels.py``.
"""

import os

from . import python_backend
from .reference import conv2d_naive

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_BACKENDS = {"python": python_backend}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = {}


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name: str):
    if name == "auto":
        name = "cython" if "cython" in _BACKENDS else "python"
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; built: {available_backends()}")
    mod = _BACKENDS[name]
    _active["name"] = name
    _active["conv2d_forward"] = mod.conv2d_forward
    _active["conv2d_input_grad"] = mod.conv2d_input_grad
    _active["conv2d_weight_grad"] = mod.conv2d_weight_grad


def backend_name() -> str:
    return _active["name"]


def conv2d_forward(x, w, stride, padding):
    return _active["conv2d_forward"](x, w, stride, padding)


def conv2d_input_grad(g, w, x_shape, stride, padding):
    return _active["conv2d_input_grad"](g, w, x_shape, stride, padding)


def conv2d_weight_grad(g, x, w_shape, stride, padding):
    return _active["conv2d_weight_grad"](g, x, w_shape, stride, padding)


set_backend(os.environ.get("GWAI_KERNELS", "auto"))
