import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.signal import correlate2d

from iqvq import tensor as T
from iqvq.tensor import NumericalError, ShapeError, Tensor, check_gradients, parameter

from kernel_cases import KERNEL_CASES, kernel_error

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@pytest.mark.parametrize("name", sorted(KERNEL_CASES))
def test_kernel_gradient(name):
    assert kernel_error(name) <= 1e-4


def _conv_oracle(x, k, padding):
    # independent route: per-channel scipy cross-correlation summed over Cin
    n, h, w, cin = x.shape
    cout = k.shape[3]
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = []
    for i in range(n):
        planes = [sum(correlate2d(xp[i, :, :, c], k[:, :, c, o], mode="valid") for c in range(cin)) for o in range(cout)]
        out.append(np.stack(planes, axis=-1))
    return np.stack(out)


@pytest.mark.parametrize("padding", [0, 1, 2])
def test_conv2d_matches_correlation_oracle(rng, padding):
    x = rng.normal(size=(2, 6, 7, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    got = T.conv2d(Tensor(x), Tensor(k), padding=padding).data
    np.testing.assert_allclose(got, _conv_oracle(x, k, padding), atol=1e-12)


def test_conv2d_stride_subsamples_dense_output(rng):
    x = rng.normal(size=(1, 8, 8, 2))
    k = rng.normal(size=(3, 3, 2, 2))
    dense = T.conv2d(Tensor(x), Tensor(k), padding=1).data
    strided = T.conv2d(Tensor(x), Tensor(k), stride=2, padding=1).data
    np.testing.assert_allclose(strided, dense[:, ::2, ::2], atol=1e-12)


def test_conv2d_identity_and_zero_kernels(rng):
    x = rng.normal(size=(5, 5, 1))
    np.testing.assert_array_equal(T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    assert not T.conv2d(Tensor(x), Tensor(np.zeros((3, 3, 1, 1)))).data.any()


def test_conv2d_averaging_kernel_zero_padding():
    x = np.full((4, 4, 1), 0.5)
    out = T.conv2d(Tensor(x), Tensor(np.full((3, 3, 1, 1), 1 / 9)), padding=1).data[..., 0]
    np.testing.assert_allclose(out[1:-1, 1:-1], 0.5, atol=1e-15)
    # corners see 4 of 9 taps, edges 6 of 9
    np.testing.assert_allclose(out[0, 0], 0.5 * 4 / 9, atol=1e-15)
    np.testing.assert_allclose(out[0, 1], 0.5 * 6 / 9, atol=1e-15)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 1, 1))))


def test_cross_entropy_examples():
    ce = lambda z, t: float(T.softmax_cross_entropy(Tensor(np.array(z, float)), t).data)  # noqa: E731
    assert ce([[0.0, 0.0, 0.0, 0.0]], [2]) == pytest.approx(math.log(4), abs=1e-12)
    assert ce([[1000.0, 0.0, 0.0]], [0]) == pytest.approx(0.0, abs=1e-12)
    # independent: -log(e / (e + e^2 + e^3))
    e = math.e
    assert ce([[1.0, 2.0, 3.0]], [0]) == pytest.approx(-math.log(e / (e + e**2 + e**3)), abs=1e-12)
    assert ce([[1.0, 2.0, 3.0]], [0]) == pytest.approx(2.4076, abs=5e-5)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_check_gradients_examples():
    x = parameter(np.array([3.0]))
    assert check_gradients(lambda: T.sum(T.square(x)), [x]) < 1e-9
    x.grad = None
    T.sum(T.square(x)).backward()
    assert x.grad[0] == pytest.approx(6.0)
    v = parameter(np.arange(5.0))
    assert check_gradients(lambda: T.sum(v), [v]) < 1e-10
    np.testing.assert_array_equal(v.grad, np.ones(5))


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_check_gradients_reports_non_finite():
    x = parameter(np.array([0.0]))
    with pytest.raises(NumericalError):
        check_gradients(lambda: T.sum(T.log(x)), [x])


def test_check_gradients_rejects_eps_outside_range():
    x = parameter(np.ones(1))
    with pytest.raises(ValueError):
        check_gradients(lambda: T.sum(x), [x], eps=1e-2)


def test_backward_requires_scalar_seed():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_shared_subexpression_accumulates():
    x = parameter(np.array([2.0]))
    y = x * x + x
    T.sum(y).backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_no_grad_records_nothing():
    x = parameter(np.ones(2))
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


def test_straight_through_forward_and_backward(rng):
    zh = parameter(rng.normal(size=(2, 3)))
    zq = Tensor(rng.normal(size=(2, 3)))
    out = T.straight_through(zh, zq)
    np.testing.assert_array_equal(out.data, zq.data)
    T.sum(out).backward()
    np.testing.assert_array_equal(zh.grad, np.ones((2, 3)))


def test_incompatible_broadcast_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        T.take_rows(Tensor(np.zeros((3, 2))), [3])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.log_softmax(Tensor(x)).data, np.log(p), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_forward_ops_finite_on_finite_input(x):
    t = Tensor(x)
    for out in (T.silu(t), T.sigmoid(t), T.softplus(t), T.exp(t * 0.1), T.layer_norm(t, Tensor(np.ones(x.shape[-1])), Tensor(np.zeros(x.shape[-1])))):
        assert np.all(np.isfinite(out.data))
        assert out.data.size == np.prod(out.shape)


@settings(max_examples=30, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=finite),
    st.sampled_from([(3, 4), (4,), (1, 4), (3, 1), ()]),
)
def test_broadcast_gradients_have_operand_shapes(a, bshape):
    x = parameter(a)
    y = parameter(np.ones(bshape))
    T.sum(x * y + y).backward()
    assert x.grad.shape == x.shape and y.grad.shape == y.shape
    # each y entry collects (x + 1) from every position it was broadcast to
    owner = np.broadcast_to(np.arange(max(1, int(np.prod(bshape)))).reshape(bshape), a.shape)
    expected = np.bincount(owner.ravel(), weights=(a + 1.0).ravel()).reshape(bshape)
    np.testing.assert_allclose(y.grad, expected, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradients_are_deterministic(seed):
    f1, p1 = KERNEL_CASES["conv2d"](np.random.default_rng(seed))
    f1().backward()
    f2, p2 = KERNEL_CASES["conv2d"](np.random.default_rng(seed))
    f2().backward()
    for a, b in zip(p1, p2):
        np.testing.assert_array_equal(a.grad, b.grad)


@pytest.mark.parametrize("r", [1, 2, 4])
def test_avg_pool_then_upsample_preserves_constants(r):
    x = Tensor(np.full((1, 8, 8, 2), 0.3))
    back = T.upsample_nearest(T.avg_pool(x, r), r)
    np.testing.assert_allclose(back.data, 0.3, atol=1e-15)
