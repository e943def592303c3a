import numpy as np
import pytest

import gwainet.tensor as T
from gwainet.tensor import (GwaiError, ShapeError, Tensor, ValidationError,
                            backward, grad, no_grad, set_debug)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, dtype=np.float64)
    backward(T.sum_(x))
    assert np.array_equal(x.grad.data, np.ones((2, 3)))


def test_backward_sum_of_squares_gives_2x():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True, dtype=np.float64)
    backward(T.sum_(T.mul(x, x)))
    assert np.allclose(x.grad.data, 2 * x.data)


def test_grads_accumulate_across_backwards():
    x = Tensor(np.ones(4), requires_grad=True, dtype=np.float64)
    backward(T.sum_(x))
    backward(T.sum_(T.mul(x, 3.0)))
    assert np.allclose(x.grad.data, 4.0)
    x.zero_grad()
    assert x.grad is None


def test_multi_use_tensor_sums_contributions():
    x = Tensor([2.0], requires_grad=True, dtype=np.float64)
    y = T.add(T.mul(x, x), x)  # x^2 + x -> dy/dx = 2x + 1
    backward(T.sum_(y))
    assert np.allclose(x.grad.data, 5.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.mul(x, 2.0)
    with pytest.raises(ShapeError):
        backward(y)


def test_backward_rejects_empty_tape():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(ValidationError):
        backward(x)


def test_tape_consumed_after_backward():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(T.sum_(T.mul(x, x)))
    assert len(T.active_tape().nodes) == 0


def test_no_grad_suppresses_recording():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = T.mul(x, 3.0)
    assert not y.requires_grad
    assert len(T.active_tape().nodes) == 0


def test_forward_ops_are_pure():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 5)))
    a = T.sigmoid(T.mul(x, 1.7))
    b = T.sigmoid(T.mul(x, 1.7))
    assert np.array_equal(a.data, b.data)


def test_mixed_dtype_rejected():
    a = Tensor(np.ones(3), dtype=np.float32)
    b = Tensor(np.ones(3), dtype=np.float64)
    with pytest.raises(ShapeError):
        T.add(a, b)


def test_shape_mismatch_names_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        T.add(a, b)


def test_grad_function_leaves_tape_and_grads_alone():
    x = Tensor([3.0], requires_grad=True, dtype=np.float64)
    y = T.sum_(T.mul(x, x))
    n_nodes = len(T.active_tape().nodes)
    (g,) = grad(y, [x])
    assert np.allclose(g.data, 6.0)
    assert x.grad is None
    assert len(T.active_tape().nodes) == n_nodes
    T.active_tape().clear()


def test_double_backward_through_grad():
    # d/dx of (dy/dx) with y = x^3: second derivative 6x
    x = Tensor([2.0], requires_grad=True, dtype=np.float64)
    y = T.sum_(T.mul(T.mul(x, x), x))
    (g,) = grad(y, [x], create_graph=True)
    backward(T.sum_(g))
    assert np.allclose(x.grad.data, 12.0)


def test_grad_of_disconnected_input_is_zero():
    x = Tensor([1.0], requires_grad=True, dtype=np.float64)
    z = Tensor([5.0], requires_grad=True, dtype=np.float64)
    y = T.sum_(T.mul(x, x))
    (gz,) = grad(y, [z])
    assert np.allclose(gz.data, 0.0)
    T.active_tape().clear()


def test_debug_mode_flags_nonfinite():
    set_debug(True)
    try:
        x = Tensor([0.0])
        with np.errstate(divide="ignore"), pytest.raises(GwaiError):
            T.log(x)
    finally:
        set_debug(False)


def test_finite_difference_on_composite_graph():
    rng = np.random.default_rng(3)
    a = Tensor(rng.uniform(0.5, 1.5, (3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.uniform(0.5, 1.5, (4, 2)), requires_grad=True, dtype=np.float64)

    def f():
        h = T.sigmoid(T.matmul(a, b))
        return T.sum_(T.mul(T.log(T.add(h, 1.0)), T.exp(T.mul(h, -0.5))))

    loss = f()
    backward(loss)
    h = 1e-5
    for t in (a, b):
        flat = t.data.reshape(-1)
        gflat = t.grad.data.reshape(-1)
        for i in range(0, flat.size, 3):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                dn = f().item()
            flat[i] = orig
            num = (up - dn) / (2 * h)
            assert abs(num - gflat[i]) / max(1.0, abs(num)) < 1e-4


def test_concat_narrow_round_trip_gradients():
    a = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True, dtype=np.float64)
    b = Tensor(np.full((1, 3, 2, 2), 2.0), requires_grad=True, dtype=np.float64)
    cat = T.concat([a, b], axis=1)
    backward(T.sum_(T.mul(cat, 3.0)))
    assert np.allclose(a.grad.data, 3.0)
    assert np.allclose(b.grad.data, 3.0)


def test_data_is_row_major_and_sized():
    t = Tensor(np.asfortranarray(np.ones((3, 4))))
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.size == 12 and t.shape == (3, 4)
