import threading

import numpy as np
import numpy.testing as npt
import pytest

from mica.tensor import (NonFiniteError, ShapeError, Tensor, concat, div,
                         finite_checks, gather_last, gelu, matmul, no_grad,
                         phi, sigmoid, softmax_lastdim, sqrt, tabs)


def test_softmax_known_values():
    out = softmax_lastdim(Tensor([1.0, 2.0, 3.0]))
    npt.assert_allclose(
        out.data,
        [0.09003057317038046, 0.24472847105479767, 0.6652409557748219],
        rtol=0, atol=1e-12)
    npt.assert_allclose(out.data.sum(), 1.0, atol=1e-15)


def test_softmax_shift_invariance_and_huge_inputs():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 7))
    a = softmax_lastdim(Tensor(x)).data
    b = softmax_lastdim(Tensor(x + 123.456)).data
    npt.assert_allclose(a, b, atol=1e-12)
    big = softmax_lastdim(Tensor([1e4, 1e4 + 1.0])).data
    assert np.all(np.isfinite(big))
    npt.assert_allclose(big.sum(), 1.0, atol=1e-15)


def test_softmax_empty_axis_rejected():
    with pytest.raises(ShapeError):
        softmax_lastdim(Tensor(np.zeros((2, 0))))


def test_phi_known_values_and_positivity():
    npt.assert_allclose(phi(Tensor([0.0, 2.0])).data, [1.0, 3.0], atol=0)
    npt.assert_allclose(phi(Tensor(-1.0)).data, np.exp(-1.0), atol=1e-15)
    x = np.linspace(-800.0, 50.0, 301)
    assert np.all(phi(Tensor(x)).data > 0.0)


def test_matmul_known_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    npt.assert_allclose((a @ b).data, [[19.0, 22.0], [43.0, 50.0]], atol=0)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_matmul_batch_broadcast_backward():
    # (B,C,N,P,dk) @ (B,1,N,dk,dv): grad wrt the broadcast operand sums over C
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(2, 3, 2, 4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 1, 2, 5, 6)), requires_grad=True)
    out = (a @ b).sum()
    out.backward()
    gb_manual = np.matmul(a.data.swapaxes(-1, -2),
                          np.ones((2, 3, 2, 4, 6))).sum(axis=1, keepdims=True)
    npt.assert_allclose(b.grad, gb_manual, atol=1e-12)
    assert a.grad.shape == a.shape


def test_add_broadcast_backward():
    x = Tensor(np.zeros((4, 3)), requires_grad=True)
    bias = Tensor(np.zeros(3), requires_grad=True)
    ((x + bias) * 2.0).sum().backward()
    npt.assert_allclose(bias.grad, [8.0, 8.0, 8.0], atol=0)
    npt.assert_allclose(x.grad, np.full((4, 3), 2.0), atol=0)


def test_grad_accumulates_across_reuse():
    x = Tensor(3.0, requires_grad=True)
    y = x * x + x  # dy/dx = 2x + 1 = 7
    y.backward()
    npt.assert_allclose(x.grad, 7.0, atol=1e-12)


def test_div_backward():
    a = Tensor(2.0, requires_grad=True)
    b = Tensor(4.0, requires_grad=True)
    div(a, b).backward()
    npt.assert_allclose(a.grad, 0.25, atol=1e-15)
    npt.assert_allclose(b.grad, -2.0 / 16.0, atol=1e-15)


def test_unary_backward_values():
    x = Tensor([-2.0, 3.0], requires_grad=True)
    tabs(x).sum().backward()
    npt.assert_allclose(x.grad, [-1.0, 1.0], atol=0)

    y = Tensor(4.0, requires_grad=True)
    sqrt(y).backward()
    npt.assert_allclose(y.grad, 0.25, atol=1e-15)

    z = Tensor(0.0, requires_grad=True)
    sigmoid(z).backward()
    npt.assert_allclose(z.grad, 0.25, atol=1e-15)
    npt.assert_allclose(sigmoid(Tensor(0.0)).data, 0.5, atol=0)

    assert gelu(Tensor(0.0)).data == 0.0
    npt.assert_allclose(gelu(Tensor(10.0)).data, 10.0, rtol=1e-6)


def test_sum_mean_axes():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    s = x.sum(axis=0)
    npt.assert_allclose(s.data, [12.0, 15.0, 18.0, 21.0], atol=0)
    m = x.mean(axis=1, keepdims=True)
    npt.assert_allclose(m.data, [[1.5], [5.5], [9.5]], atol=0)
    m.sum().backward()
    npt.assert_allclose(x.grad, np.full((3, 4), 0.25), atol=0)


def test_reshape_swapaxes_roundtrip_backward():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
    y = x.swapaxes(0, 2).reshape(4, 6)
    (y * y).sum().backward()
    npt.assert_allclose(x.grad, 2.0 * x.data, atol=0)


def test_concat_backward_splits():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 3)), requires_grad=True)
    out = concat([a, b], axis=1)
    assert out.shape == (2, 5)
    (out * Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
    npt.assert_allclose(a.grad, [[0.0, 1.0], [5.0, 6.0]], atol=0)
    npt.assert_allclose(b.grad, [[2.0, 3.0, 4.0], [7.0, 8.0, 9.0]], atol=0)


def test_gather_last_forward_and_repeated_index_backward():
    x = Tensor(np.array([[10.0, 20.0, 30.0]]), requires_grad=True)
    idx = np.array([[0, 1], [1, 2], [2, 2]])
    out = gather_last(x, idx)
    assert out.shape == (1, 3, 2)
    npt.assert_allclose(out.data[0, 2], [30.0, 30.0], atol=0)
    out.sum().backward()
    npt.assert_allclose(x.grad, [[1.0, 2.0, 3.0]], atol=0)


def test_gather_index_out_of_range():
    with pytest.raises(ShapeError):
        gather_last(Tensor(np.zeros((2, 3))), np.array([3]))


def test_no_grad_blocks_tape():
    x = Tensor(2.0, requires_grad=True)
    with no_grad():
        y = x * x
    assert not y.requires_grad
    assert y._backward is None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_checks_raise_and_can_be_disabled():
    with pytest.raises(NonFiniteError):
        div(Tensor(1.0), Tensor(0.0))
    with finite_checks(False):
        out = div(Tensor(1.0), Tensor(0.0))
    assert np.isinf(out.data)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_mode_flags_are_thread_local():
    # workers holding both flags off must not leak into the main thread
    # (parallel seed training toggles them from a pool)
    from concurrent.futures import ThreadPoolExecutor
    release = threading.Event()
    inside = threading.Barrier(5)

    def toggled_off():
        with no_grad(), finite_checks(False):
            inside.wait(timeout=5)
            assert not (Tensor(1.0, requires_grad=True) * 2.0).requires_grad
            assert np.isinf(div(Tensor(1.0), Tensor(0.0)).data)
            release.wait(timeout=5)
        return True

    with ThreadPoolExecutor(max_workers=4) as pool:
        futures = [pool.submit(toggled_off) for _ in range(4)]
        inside.wait(timeout=5)
        assert (Tensor(1.0, requires_grad=True) * 2.0).requires_grad
        with pytest.raises(NonFiniteError):
            div(Tensor(1.0), Tensor(0.0))
        release.set()
        assert all(f.result(timeout=5) for f in futures)
    with pytest.raises(NonFiniteError):
        div(Tensor(1.0), Tensor(0.0))


def test_zero_grad_resets():
    x = Tensor(1.0, requires_grad=True)
    (x * 3.0).backward()
    npt.assert_allclose(x.grad, 3.0, atol=0)
    x.zero_grad()
    assert x.grad is None
