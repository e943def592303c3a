"""N-dimensional tensors with reverse-mode automatic differentiation.

The engine is a thread-local tape: every differentiable primitive appends a
node in execution order and ``backward`` replays the tape in reverse, which
is a valid schedule because recording order is topological by construction.
Backward rules are themselves written in terms of primitives, so gradients
of gradients work for the op surface that needs it (the critic's
convolution / LeakyReLU / linear stack, plus the reductions around the
gradient penalty).
"""

from __future__ import annotations

import os
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class GwaiError(Exception):
    """Base error for the package."""


class ValidationError(GwaiError):
    """Bad arguments, config or file contents (CLI exit code 1)."""


class ShapeError(ValidationError):
    """Shape or dtype contract violation."""


_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tape:
    """Ordered record of primitive applications on one thread."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[Node] = []

    def clear(self):
        """Drop all nodes and the saved values they hold."""
        for node in self.nodes:
            node.inputs = ()
            node.output = None
            node.vjp = None
        self.nodes.clear()


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.debug = os.environ.get("GWAI_DEBUG", "") not in ("", "0")


_state = _State()


def active_tape() -> Tape:
    return _state.tape


def set_debug(flag: bool):
    _state.debug = bool(flag)


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class _GradMode:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.prev = None

    def __enter__(self):
        self.prev = _state.grad_enabled
        _state.grad_enabled = self.enabled
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self.prev
        return False


def no_grad() -> _GradMode:
    """Context manager that disables tape recording."""
    return _GradMode(False)


def enable_grad() -> _GradMode:
    return _GradMode(True)


class Tensor:
    """Dense float array with optional participation in the gradient tape.

    ``data`` is always C-contiguous (row-major) float32 or float64; the
    precision is fixed at construction and strictly preserved by every op.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.dtype not in _FLOAT_DTYPES:
            raise ShapeError(f"tensors are float32/float64, got {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Tensor] = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph helpers ----------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        self.requires_grad = bool(flag)
        return self

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return pow_scalar(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


# -- op plumbing ----------------------------------------------------------

def apply_op(op: str, inputs: Sequence[Tensor], data: np.ndarray,
             vjp: Callable) -> Tensor:
    """Finish a primitive: wrap the result and record it when needed.

    ``vjp(g, needs)`` receives the upstream gradient tensor and a boolean
    per input; it returns one gradient tensor (or None) per input.  It must
    be written with primitive ops so that recording it (create_graph) yields
    a differentiable graph.
    """
    requires = _state.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if _state.debug and not np.all(np.isfinite(out.data)):
        raise GwaiError(f"debug: op '{op}' produced non-finite values")
    if requires:
        _state.tape.nodes.append(Node(op, tuple(inputs), out, vjp))
    return out


def _as_const_scalar(x, dtype):
    # python scalars stay weakly typed so the tensor dtype wins
    return float(x)


def _check_same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: operand dtypes differ: {a.dtype} vs {b.dtype}")


# -- elementwise binary ---------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_const_scalar(b, a.dtype)
        return apply_op("add_const", (a,), a.data + c,
                        lambda g, needs: [g])
    _check_same_shape("add", a, b)
    return apply_op("add", (a, b), a.data + b.data,
                    lambda g, needs: [g if needs[0] else None,
                                      g if needs[1] else None])


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape("sub", a, b)
    return apply_op("sub", (a, b), a.data - b.data,
                    lambda g, needs: [g if needs[0] else None,
                                      neg(g) if needs[1] else None])


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.data, lambda g, needs: [neg(g)])


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = _as_const_scalar(b, a.dtype)
        return apply_op("mul_const", (a,), a.data * c,
                        lambda g, needs: [mul(g, c)])
    _check_same_shape("mul", a, b)
    return apply_op("mul", (a, b), a.data * b.data,
                    lambda g, needs: [mul(g, b) if needs[0] else None,
                                      mul(g, a) if needs[1] else None])


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / _as_const_scalar(b, a.dtype))
    _check_same_shape("div", a, b)

    def vjp(g, needs):
        ga = div(g, b) if needs[0] else None
        gb = neg(mul(g, div(a, mul(b, b)))) if needs[1] else None
        return [ga, gb]

    return apply_op("div", (a, b), a.data / b.data, vjp)


# -- elementwise unary ----------------------------------------------------

def pow_scalar(a: Tensor, c) -> Tensor:
    c = float(c)

    def vjp(g, needs):
        return [mul(mul(pow_scalar(a, c - 1.0), c), g)]

    return apply_op("pow", (a,), a.data ** c, vjp)


def sqrt(a: Tensor) -> Tensor:
    out_holder = []

    def vjp(g, needs):
        return [mul(div(g, out_holder[0]), 0.5)]

    out = apply_op("sqrt", (a,), np.sqrt(a.data), vjp)
    out_holder.append(out)
    return out


def exp(a: Tensor) -> Tensor:
    out_holder = []

    def vjp(g, needs):
        return [mul(g, out_holder[0])]

    out = apply_op("exp", (a,), np.exp(a.data), vjp)
    out_holder.append(out)
    return out


def log(a: Tensor) -> Tensor:
    return apply_op("log", (a,), np.log(a.data),
                    lambda g, needs: [div(g, a)])


def abs_(a: Tensor) -> Tensor:
    sign = Tensor(np.sign(a.data))
    return apply_op("abs", (a,), np.abs(a.data),
                    lambda g, needs: [mul(g, sign)])


def sigmoid(a: Tensor) -> Tensor:
    out_holder = []

    def vjp(g, needs):
        y = out_holder[0]
        return [mul(g, mul(y, add(neg(y), 1.0)))]

    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = apply_op("sigmoid", (a,), data, vjp)
    out_holder.append(out)
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = Tensor(((a.data > lo) & (a.data < hi)).astype(a.dtype))
    return apply_op("clip", (a,), np.clip(a.data, lo, hi),
                    lambda g, needs: [mul(g, mask)])


def lrelu(a: Tensor, alpha: float) -> Tensor:
    """max(x, 0) + alpha * min(x, 0); slope at exactly 0 is alpha."""
    slope = np.where(a.data > 0, a.dtype.type(1), a.dtype.type(alpha))
    mask = Tensor(slope)
    return apply_op("lrelu", (a,), a.data * slope,
                    lambda g, needs: [mul(g, mask)])


# -- shape ops ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    new = a.data.reshape(shape)
    return apply_op("reshape", (a,), new,
                    lambda g, needs: [reshape(g, a.shape)])


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d expects a matrix, got shape {a.shape}")
    return apply_op("transpose2d", (a,), a.data.T.copy(),
                    lambda g, needs: [transpose2d(g)])


def concat(parts: Iterable[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    widths = [p.shape[axis] for p in parts]
    offs = np.concatenate([[0], np.cumsum(widths)])

    def vjp(g, needs):
        return [narrow(g, axis, int(offs[i]), widths[i]) if needs[i] else None
                for i in range(len(parts))]

    return apply_op("concat", tuple(parts),
                    np.concatenate([p.data for p in parts], axis=axis), vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    before = start
    after = a.shape[axis] - start - length
    return apply_op("narrow", (a,), a.data[tuple(idx)].copy(),
                    lambda g, needs: [pad_zeros(g, axis, before, after)])


def pad_zeros(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    pads = [(0, 0)] * a.ndim
    pads[axis] = (before, after)
    length = a.shape[axis]
    return apply_op("pad_zeros", (a,), np.pad(a.data, pads),
                    lambda g, needs: [narrow(g, axis, before, length)])


# -- reductions and broadcast --------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axis)
    shape = a.shape

    def vjp(g, needs):
        return [expand_to(g, shape, axis)]

    return apply_op("sum", (a,), data, vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))
    return mul(sum_(a, axis), 1.0 / n)


def expand_to(a: Tensor, shape, axis) -> Tensor:
    """Inverse of ``sum_``: broadcast over the summed-out axes."""
    shape = tuple(shape)
    if axis is None:
        full = np.broadcast_to(a.data, shape)
    else:
        keep = list(shape)
        for ax in axis:
            keep[ax] = 1
        full = np.broadcast_to(a.data.reshape(keep), shape)

    def vjp(g, needs):
        return [sum_(g, axis)]

    return apply_op("expand_to", (a,), np.ascontiguousarray(full), vjp)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtypes differ: {a.dtype} vs {b.dtype}")

    def vjp(g, needs):
        ga = matmul(g, transpose2d(b)) if needs[0] else None
        gb = matmul(transpose2d(a), g) if needs[1] else None
        return [ga, gb]

    return apply_op("matmul", (a, b), a.data @ b.data, vjp)


def add_row_bias(x: Tensor, b: Tensor) -> Tensor:
    """(B, M) + (M,) with gradient summed over the batch."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_row_bias: {x.shape} + {b.shape}")

    def vjp(g, needs):
        return [g if needs[0] else None,
                sum_(g, axis=(0,)) if needs[1] else None]

    return apply_op("add_row_bias", (x, b), x.data + b.data, vjp)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """(B, C, H, W) + (C,) broadcast, the only broadcasting add we support."""
    if x.ndim != 4 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_channel_bias: {x.shape} + {b.shape}")

    def vjp(g, needs):
        return [g if needs[0] else None,
                sum_(g, axis=(0, 2, 3)) if needs[1] else None]

    return apply_op("add_channel_bias", (x, b),
                    x.data + b.data.reshape(1, -1, 1, 1), vjp)


# -- backward pass ---------------------------------------------------------

def _seed_ones(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def backward(loss: Tensor):
    """Populate ``.grad`` on every requires_grad tensor reachable from loss.

    Gradients accumulate (+=) into existing ``.grad`` values; callers zero
    them between optimizer steps.  The tape is consumed.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if not tape.nodes:
        raise ValidationError("backward called with an empty tape")
    # entries: id -> [tensor, accumulated grad]
    grads: dict[int, list] = {id(loss): [loss, _seed_ones(loss)]}
    with no_grad():
        for node in reversed(tape.nodes):
            entry = grads.pop(id(node.output), None)
            if entry is None:
                continue
            out_t, g = entry
            _write_grad(out_t, g)
            needs = [t.requires_grad for t in node.inputs]
            gs = node.vjp(g, needs)
            for t, gi in zip(node.inputs, gs):
                if gi is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = [t, gi]
                else:
                    acc[1] = add(acc[1], gi)
        for t, g in grads.values():
            _write_grad(t, g)
    tape.clear()


def _write_grad(t: Tensor, g: Tensor):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = Tensor(g.data.copy())
    else:
        t.grad = Tensor(t.grad.data + g.data)


def grad(output: Tensor, inputs: Sequence[Tensor],
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar w.r.t. ``inputs`` without touching ``.grad``.

    The tape is left intact.  With ``create_graph`` the returned tensors are
    recorded, so a later ``backward`` differentiates through them (used by
    the critic's gradient penalty).  A requested input that is itself an
    intermediate acts as a cut point: propagation stops there, so inputs are
    treated as independent leaves.
    """
    if output.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    snapshot = list(_state.tape.nodes)
    requested = {id(t) for t in inputs}
    # forward reachability from the requested inputs
    desc = set(requested)
    for node in snapshot:
        if any(id(t) in desc for t in node.inputs):
            desc.add(id(node.output))
    results: dict[int, Tensor] = {}
    if id(output) not in desc:
        return [zeros_like(t) for t in inputs]
    grads: dict[int, list] = {id(output): [output, _seed_ones(output)]}
    with _GradMode(create_graph):
        for node in reversed(snapshot):
            entry = grads.pop(id(node.output), None)
            if entry is None:
                continue
            g = entry[1]
            if id(node.output) in requested:
                results[id(node.output)] = g
                continue
            needs = [t.requires_grad and id(t) in desc for t in node.inputs]
            gs = node.vjp(g, needs)
            for t, gi in zip(node.inputs, gs):
                if gi is None or id(t) not in desc:
                    continue
                acc = grads.get(id(t))
                if acc is None:
                    grads[id(t)] = [t, gi]
                else:
                    acc[1] = add(acc[1], gi)
    for tid, entry in grads.items():
        if tid in requested:
            results[tid] = entry[1]
    return [results.get(id(t)) if results.get(id(t)) is not None else zeros_like(t)
            for t in inputs]


def zero_grads(tensors: Iterable[Tensor]):
    for t in tensors:
        t.grad = None
