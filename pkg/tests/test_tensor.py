import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ftimexer import tensor as tn
from ftimexer.tensor import Tensor, TapeError

from conftest import numeric_grad, rel_err


def check_grad(build, *arrays, tol=1e-4):
    """Compare autodiff gradients of ``build(*tensors)`` with central differences."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    tn.backward(build(*leaves))
    for leaf, arr in zip(leaves, arrays):
        work = arr.copy()

        def f():
            with tn.no_grad():
                args = [Tensor(work) if l is leaf else Tensor(l.data) for l in leaves]
                return float(build(*args).data)

        num = numeric_grad(f, work)
        assert rel_err(leaf.grad, num) < tol


# ------------------------------------------------------------------ matmul


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_matmul_row_col():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


def test_matmul_sum_grad_is_ones_bt():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = Tensor(A, requires_grad=True)
    tn.backward(tn.sum(a @ Tensor(B)))
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ B.T, atol=1e-12)
    check_grad(lambda x, y: tn.sum(x @ y), A, B)


def test_matmul_shape_errors():
    with pytest.raises(ValueError, match="inner dimensions"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    with pytest.raises(ValueError):
        Tensor(np.ones(3)) @ Tensor(np.ones((3, 1)))


def test_batched_matmul_grad():
    rng = np.random.default_rng(0)
    check_grad(lambda a, b: tn.sum_squares(a @ b), rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))
    check_grad(lambda a, b: tn.sum_squares(a @ b), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


# ------------------------------------------------------------- elementwise


def test_add_shape_mismatch_raises():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))


def test_bias_row_add_grad():
    rng = np.random.default_rng(1)
    check_grad(lambda x, b: tn.sum_squares(x + b), rng.normal(size=(4, 3)), rng.normal(size=3))


def test_relu_negative_zero_grad():
    x = Tensor([-2.0], requires_grad=True)
    y = tn.relu(x)
    tn.backward(tn.sum(y))
    assert y.data[0] == 0.0 and x.grad[0] == 0.0


def test_mse_cases():
    assert float(tn.mse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).data) == 0.0
    assert float(tn.mse(Tensor([1.0, 2.0, 3.0]), Tensor([1.0, 2.0, 4.0])).data) == pytest.approx(1 / 3, abs=1e-15)


@pytest.mark.parametrize("fn", [tn.gelu, tn.sigmoid, tn.tanh, tn.relu, tn._abs])
def test_elementwise_grads(fn):
    x = np.random.default_rng(2).normal(size=(3, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kinks
    check_grad(lambda t: tn.sum_squares(fn(t)), x)


# ------------------------------------------------------------------ softmax


def test_softmax_uniform():
    out = tn.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logits_stable():
    with np.errstate(over="raise"):
        out = tn.softmax(Tensor([1000.0, 0.0])).data
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_grad():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(3, 5))
    check_grad(lambda x: tn.sum(tn.mul(tn.softmax(x, axis=-1), Tensor(w))), rng.normal(size=(3, 5)))


# ---------------------------------------------------------------- layernorm


def test_layernorm_constant_row():
    out = tn.layernorm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[0.0, 0.0, 0.0]])


def test_layernorm_hand_case():
    out = tn.layernorm(Tensor([1.0, 2.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-15)
    r = np.sqrt(1.5)
    np.testing.assert_allclose(out.data, [-r, 0.0, r], atol=1e-12)


def test_layernorm_grad():
    rng = np.random.default_rng(5)
    w = rng.normal(size=(2, 4))
    check_grad(lambda x, g, b: tn.sum(tn.mul(tn.layernorm(x, g, b), Tensor(w))),
               rng.normal(size=(2, 4)), rng.normal(size=4), rng.normal(size=4))


def test_layernorm_bad_gain_shape():
    with pytest.raises(ValueError):
        tn.layernorm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3)))


# ----------------------------------------------------------------- backward


def test_sum_grad_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tn.backward(tn.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_sum_x_times_x():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tn.backward(tn.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0 + x * 5.0 + x
    tn.backward(tn.sum(y))
    assert x.grad[0] == 8.0


def test_leaf_grad_shape_matches():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    tn.backward(tn.sum_squares(x @ Tensor(np.ones((3, 4)))))
    assert x.grad.shape == x.shape


def test_grad_accumulates_across_graphs():
    x = Tensor([1.0], requires_grad=True)
    tn.backward(tn.sum(x * 3.0))
    tn.backward(tn.sum(x * 4.0))
    assert x.grad[0] == 7.0


def test_second_backward_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tn.sum(x * x)
    tn.backward(loss)
    with pytest.raises(TapeError):
        tn.backward(loss)


def test_backward_on_leaf_or_constant_raises():
    with pytest.raises(TapeError):
        tn.backward(Tensor(1.0, requires_grad=True))
    with pytest.raises(TapeError):
        tn.backward(tn.sum(Tensor([1.0, 2.0])))


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        tn.backward(x * 2.0)


def test_merged_graphs_share_tape():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    left, right = a * 3.0, b * 4.0
    tn.backward(tn.sum(tn.mul(left, right)))
    assert a.grad[0] == 24.0 and b.grad[0] == 12.0


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with tn.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y.is_leaf


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        x = Tensor([1.0], requires_grad=True)
        seen["req"] = (x * 2.0).requires_grad

    with tn.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["req"] is True


def test_two_layer_mlp_grad():
    rng = np.random.default_rng(6)
    x, y = rng.normal(size=(5, 3)), rng.normal(size=(5, 1))

    def build(w1, b1, w2):
        h = tn.tanh(Tensor(x) @ w1 + b1)
        return tn.mse(h @ w2, Tensor(y))

    check_grad(build, rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 1)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_random_graph_grads(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(4, 3))

    def build(a, b, g):
        h = tn.gelu(a @ b)
        s = tn.softmax(h, axis=-1)
        n = tn.layernorm(tn.concat([h, s], axis=-1), g, Tensor(np.zeros(6)))
        picked = n[:, 1:4]
        return tn.sum(tn.mul(picked, Tensor(w))) + tn.mean(tn.swapaxes(h, 0, 1))

    check_grad(build, rng.normal(size=(4, 5)), rng.normal(size=(5, 3)), rng.normal(size=6) + 1.5)


# ---------------------------------------------------------------- shape ops


def test_shape_ops_grad():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(3, 2, 4))

    def build(x):
        t = tn.transpose(x.reshape(2, 3, 4), (1, 0, 2))
        e = tn.expand(x[0:1].reshape(1, 1, 4), (3, 2, 4))
        return tn.sum(tn.mul(t + e, Tensor(w)))

    check_grad(build, rng.normal(size=(6, 4)))


def test_fancy_index_grad_accumulates_repeats():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tn.backward(tn.sum(x[np.array([0, 0, 2])]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_expand_bad_shape():
    with pytest.raises(ValueError):
        tn.expand(Tensor(np.ones((2, 3))), (3, 3))


# ------------------------------------------------------------- spectral ops


def test_dft_op_matches_numpy():
    x = np.random.default_rng(8).normal(size=(3, 6))
    z = tn.dft(Tensor(x)).data
    ref = np.fft.fft(x, axis=-1)
    np.testing.assert_allclose(z[:, 0], ref.real, atol=1e-12)
    np.testing.assert_allclose(z[:, 1], ref.imag, atol=1e-12)
    np.testing.assert_allclose(tn.idft_real(Tensor(z)).data, x, atol=1e-12)


@pytest.mark.parametrize("n", [3, 4, 5, 8])
def test_spectral_op_grads(n):
    rng = np.random.default_rng(n)
    w = rng.normal(size=(2, n))

    def build(x):
        z = tn.dft(x)
        amp = tn.modulus(z)
        rebuilt = tn.mul(tn.expand(amp.reshape(2, 1, n), (2, 2, n)), tn.phasor(z))
        return tn.sum(tn.mul(tn.idft_real(rebuilt), Tensor(w))) + tn.sum_squares(amp)

    check_grad(build, rng.normal(size=(2, n)))


def test_phasor_at_origin():
    z = Tensor(np.zeros((2, 3)), requires_grad=True)
    u = tn.phasor(z)
    np.testing.assert_array_equal(u.data, [[1, 1, 1], [0, 0, 0]])
    m = tn.modulus(z)
    tn.backward(tn.sum(m))
    np.testing.assert_array_equal(z.grad, 0.0)
