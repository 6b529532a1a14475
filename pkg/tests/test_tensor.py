import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from densebam_gi import tensor as T
from densebam_gi.tensor import ContractError, Parameter, Tensor

from oracles import conv_oracle, matmul_oracle, pool_oracle


# ---------------------------------------------------------------- conv / pool


def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(y.data, x)


def test_conv_all_ones_kernel_matches_loops():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    k = np.ones((1, 1, 3, 3))
    y = T.conv2d(Tensor(x), Tensor(k), padding=1).data
    assert y[0, 0, 1, 1] == 45.0
    assert np.allclose(y, conv_oracle(x, k, padding=1), rtol=0, atol=1e-12)


def test_conv_zero_kernel_annihilates():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 4))
    y = T.conv2d(Tensor(x), Tensor(np.zeros((2, 3, 3, 3))), Tensor(np.zeros(2)), padding=1)
    assert not y.data.any()


@pytest.mark.parametrize("stride,padding,dilation,ksize", [(1, 0, 1, 3), (2, 3, 1, 7), (1, 2, 2, 3), (2, 1, 1, 3),
                                                           (1, 0, 1, 1), (3, 1, 2, 2)])
def test_conv_matches_nested_loops(stride, padding, dilation, ksize):
    rng = np.random.default_rng(stride * 10 + padding)
    x = rng.normal(size=(2, 3, 9, 8))
    k = rng.normal(size=(4, 3, ksize, ksize))
    b = rng.normal(size=4)
    y = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, padding, dilation).data
    assert np.allclose(y, conv_oracle(x, k, b, stride, padding, dilation), rtol=0, atol=1e-12)


def test_conv_shape_contract():
    with pytest.raises(ContractError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ContractError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_avg_pool_examples():
    assert T.avg_pool2d(Tensor(np.full((1, 1, 4, 4), 3.5)), 2, 2).data.tolist() == [[[[3.5, 3.5], [3.5, 3.5]]]]
    assert T.avg_pool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).item() == 2.5


def test_avg_pool_matches_loops():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4))
    y = T.avg_pool2d(Tensor(x), 2, 2).data
    assert np.allclose(y, pool_oracle(x, 2, 2, lambda v: sum(v) / len(v)), rtol=0, atol=1e-12)


def test_max_pool_matches_loops_with_padding():
    x = np.random.default_rng(2).normal(size=(2, 2, 7, 6))
    y = T.max_pool2d(Tensor(x), 3, 2, padding=1).data
    padded = np.full((2, 2, 9, 8), -np.inf)
    padded[:, :, 1:8, 1:7] = x
    assert np.array_equal(y, pool_oracle(padded, 3, 2, max))


def test_global_avg_pool_examples():
    x = np.zeros((1, 2, 2, 2))
    x[0, 0] = 7.0
    x[0, 1] = [[1, 3], [5, 7]]
    assert T.global_avg_pool(Tensor(x)).data.reshape(-1).tolist() == [7.0, 4.0]
    r = np.random.default_rng(3).normal(size=(2, 3, 4, 5))
    flat = np.array([[sum(r[i, c].reshape(-1)) / 20 for c in range(3)] for i in range(2)])
    assert np.allclose(T.global_avg_pool(Tensor(r)).data.reshape(2, 3), flat, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- batch norm


def test_batch_norm_train_normalizes():
    x = np.random.default_rng(4).normal(3.0, 2.0, size=(4, 3, 5, 5))
    y = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3), training=True).data
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-5)


def test_batch_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(5).normal(size=(3, 2, 2, 2))
    beta = np.array([0.25, -1.5])
    y = T.batch_norm(Tensor(x), Tensor(np.zeros(2)), Tensor(beta), np.zeros(2), np.ones(2), training=True).data
    assert np.array_equal(y, np.broadcast_to(beta.reshape(1, 2, 1, 1), y.shape))


def test_batch_norm_matches_two_pass_statistics():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]], [[-1.0, 0.5], [2.0, 8.0]]],
                  [[[0.0, 5.0], [1.0, 1.0]], [[3.0, 3.0], [-2.0, 0.0]]]])
    gamma, beta, eps = np.array([1.5, 0.5]), np.array([0.1, -0.2]), 1e-5
    rm, rv = np.zeros(2), np.ones(2)
    y = T.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), rm, rv, training=True, momentum=0.1, eps=eps).data
    for c in range(2):
        vals = x[:, c].reshape(-1)
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        expect = gamma[c] * (x[:, c] - mu) / math.sqrt(var + eps) + beta[c]
        assert np.allclose(y[:, c], expect, rtol=0, atol=1e-12)
        unbiased = var * len(vals) / (len(vals) - 1)
        assert rm[c] == pytest.approx(0.1 * mu, abs=1e-15)
        assert rv[c] == pytest.approx(0.9 + 0.1 * unbiased, abs=1e-15)


def test_batch_norm_eval_uses_running_stats():
    x = np.random.default_rng(6).normal(size=(2, 2, 3, 3))
    rm, rv = np.array([0.5, -0.5]), np.array([2.0, 0.5])
    y = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm.copy(), rv.copy(), training=False).data
    expect = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
    assert np.allclose(y, expect, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- elementwise, matmul, softmax


def test_sigmoid_tanh_at_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5
    assert T.tanh(Tensor(0.0)).item() == 0.0


def test_sigmoid_is_stable_for_large_inputs():
    y = T.sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(y)) and y[0] == 0.0 and y[1] == 1.0


def test_softmax_uniform_vector():
    assert np.allclose(T.softmax(Tensor(np.full(7, 2.5))).data, 1 / 7, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_properties(v, shift):
    p = T.softmax(Tensor(v)).data
    assert np.all(p > 0) and np.all(p <= 1)
    assert abs(p.sum() - 1) < 1e-9
    assert np.allclose(T.softmax(Tensor(v + shift)).data, p, rtol=0, atol=1e-12)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_oracle(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_contract():
    with pytest.raises(ContractError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_concat_channels_then_slice_recovers_operands():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 5, 4, 4))
    cat = T.concat_channels([Tensor(a), Tensor(b)]).data
    assert np.array_equal(cat[:, :3], a) and np.array_equal(cat[:, 3:], b)


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(ContractError):
        T.embedding(Tensor(np.zeros((4, 2))), [0, 4])


# ---------------------------------------------------------------- backward


def test_linear_map_derivative():
    x = np.array([1.0, -2.0, 0.5])
    w = Parameter(np.random.default_rng(9).normal(size=(2, 3)))
    T.backward(T.tsum(T.matmul(w, Tensor(x))))
    assert np.array_equal(w.grad, np.broadcast_to(x, (2, 3)))


def test_parameters_off_the_path_get_no_grad():
    a, b = Parameter(np.ones(3)), Parameter(np.ones(3))
    T.backward(T.tsum(T.square(a)))
    assert b.grad is None and np.array_equal(a.grad, 2 * np.ones(3))


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(T.mul(Parameter(np.ones(3)), 2.0))


def test_gradient_accumulates_over_shared_uses():
    a = Parameter(np.array([2.0]))
    T.backward(T.tsum(T.mul(a, a)))
    assert a.grad[0] == 4.0


def test_no_grad_records_nothing():
    a = Parameter(np.ones(2))
    with T.no_grad():
        y = T.mul(a, 3.0)
    assert not y.requires_grad and y._backward is None


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([((3, 4), (4,)), ((3, 1), (1, 4)), ((2, 3, 4), (3, 1)), ((5,), ())]), st.integers(0, 2**31))
def test_broadcast_gradients_sum_over_broadcast_axes(shapes, seed):
    rng = np.random.default_rng(seed)
    a, b = Parameter(rng.normal(size=shapes[0])), Parameter(rng.normal(size=shapes[1]))
    out = T.mul(a, b)
    w = rng.normal(size=out.shape)
    T.backward(T.tsum(T.mul(out, w)))
    full_a = np.broadcast_to(b.data, out.shape) * w
    full_b = np.broadcast_to(a.data, out.shape) * w
    assert a.grad.shape == a.shape and b.grad.shape == b.shape
    assert np.allclose(a.grad.sum(), full_a.sum()) and np.allclose(b.grad.sum(), full_b.sum())


def test_forward_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(10)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)) * 100)
    for y in (T.sigmoid(x), T.tanh(x), T.softmax(x), T.relu(x), T.max_pool2d(x, 3, 2, 1), T.global_avg_pool(x)):
        assert np.all(np.isfinite(y.data))
