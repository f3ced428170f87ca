import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from chromaflow import autodiff as ad
from chromaflow.errors import AccumulationError, ShapeError
from chromaflow.gradcheck import check_gradient, relative_error

floats = st.floats(-3, 3, allow_nan=False, width=64)


def grad_of(fn, x):
    leaf = ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    ad.backward(fn(leaf))
    return leaf.grad


def assert_gradcheck(fn, x, tol=1e-5):
    res = check_gradient(fn, x)
    assert res.checked > 0
    assert res.max_rel_err < tol, res.max_rel_err


@given(hnp.arrays(np.float64, (3, 4), elements=floats), hnp.arrays(np.float64, (3, 4), elements=floats))
def test_add_mul_sub_gradients(a, b):
    g = grad_of(lambda t: ad.tensor_sum(ad.add(ad.mul(t, b), ad.sub(t, b))), a)
    np.testing.assert_allclose(g, b + 1.0)


def test_scalar_broadcast_gradient():
    g = grad_of(lambda t: ad.tensor_sum(ad.mul(t, np.full((2, 3), 2.0))), np.array(1.5))
    assert g.shape == () and g == 12.0


def test_mismatched_shapes_raise():
    with pytest.raises(ShapeError):
        ad.add(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((3, 2))))


@pytest.mark.parametrize("op", ["tanh", "square", "sqrt"])
def test_smooth_unary_gradcheck(op, rng):
    x = rng.uniform(0.2, 2.0, size=(4, 5))
    assert_gradcheck(lambda t: ad.tensor_sum(ad.elementwise(op, t)), x)


def test_relu_subgradient_at_zero_is_zero():
    g = grad_of(lambda t: ad.tensor_sum(ad.relu(t)), np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_clamp01_boundary_gradient_is_zero():
    g = grad_of(lambda t: ad.tensor_sum(ad.clamp01(t)), np.array([-0.5, 0.0, 0.5, 1.0, 1.5]))
    np.testing.assert_array_equal(g, [0, 0, 1, 0, 0])


def test_maxpool_tie_goes_to_first_cell():
    x = np.ones((1, 1, 2, 2))
    g = grad_of(lambda t: ad.tensor_sum(ad.maxpool2(t)), x)
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


def test_maxpool_odd_size_rejected():
    with pytest.raises(ShapeError):
        ad.maxpool2(ad.Tensor(np.zeros((1, 1, 3, 4))))


def test_max_reduce_first_index_on_ties():
    g = grad_of(lambda t: ad.tensor_sum(ad.max_reduce(t, axis=-1)), np.array([[2.0, 5.0, 5.0]]))
    np.testing.assert_array_equal(g, [[0, 1, 0]])


def naive_conv(x, k, b, pad):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i : i + kh, j : j + kw]
            out[:, :, i, j] = np.einsum("nchw,fchw->nf", patch, k) + b
    return out


@pytest.mark.parametrize("channels_last", [False, True])
def test_conv2d_matches_loop_oracle(channels_last, rng):
    x = rng.standard_normal((2, 3, 6, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    inp = x.transpose(0, 2, 3, 1) if channels_last else x
    out = ad.conv2d(ad.Tensor(inp), ad.Tensor(k), ad.Tensor(b), padding=1, channels_last=channels_last).data
    if channels_last:
        out = out.transpose(0, 3, 1, 2)
    np.testing.assert_allclose(out, naive_conv(x, k, b, 1), atol=1e-12)


def test_conv2d_gradients(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    w = rng.standard_normal((1, 3, 4, 4))
    assert_gradcheck(lambda t: ad.tensor_sum(ad.mul(ad.conv2d(t, ad.Tensor(k), ad.Tensor(b), padding=1), w)), x)
    assert_gradcheck(lambda t: ad.tensor_sum(ad.mul(ad.conv2d(ad.Tensor(x), t, ad.Tensor(b), padding=1), w)), k)


def test_conv2d_non_integral_output_rejected():
    with pytest.raises(ShapeError):
        ad.conv2d(ad.Tensor(np.zeros((1, 1, 4, 4))), ad.Tensor(np.zeros((1, 1, 3, 3))), ad.Tensor(np.zeros(1)), stride=2)


def test_dense_and_matmul_gradients(rng):
    x = rng.standard_normal((3, 5))
    w = rng.standard_normal((4, 5))
    b = rng.standard_normal(4)
    assert_gradcheck(lambda t: ad.tensor_sum(ad.square(ad.dense(t, ad.Tensor(w), ad.Tensor(b)))), x)
    assert_gradcheck(lambda t: ad.tensor_sum(ad.tanh(ad.matmul(ad.Tensor(x), t))), w.T)
    with pytest.raises(ShapeError):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))


def test_softmax_cross_entropy_value_and_gradient(rng):
    z = rng.standard_normal((4, 10))
    y = np.array([0, 3, 9, 3])
    loss = ad.softmax_cross_entropy(ad.Tensor(z), y).item()
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert loss == pytest.approx(-logp[np.arange(4), y].mean(), rel=1e-12)
    assert_gradcheck(lambda t: ad.softmax_cross_entropy(t, y, "sum"), z)
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(ad.Tensor(z), np.array([0, 1, 2, 10]))


def test_getitem_fancy_index_accumulates():
    g = grad_of(lambda t: ad.tensor_sum(ad.getitem(t, np.array([0, 0, 2]))), np.zeros(3))
    np.testing.assert_array_equal(g, [2, 0, 1])


def test_concat_transpose_reshape_gradients(rng):
    a = rng.standard_normal((2, 3))
    w = rng.standard_normal((3, 4))
    fn = lambda t: ad.tensor_sum(ad.mul(ad.reshape(ad.transpose(ad.concat([t, ad.square(t)], axis=0)), (3, 4)), w))
    assert_gradcheck(fn, a)


def test_backward_twice_without_reset_raises():
    leaf = ad.Tensor(np.ones(3), requires_grad=True)
    ad.backward(ad.tensor_sum(ad.square(leaf)))
    with pytest.raises(AccumulationError):
        ad.backward(ad.tensor_sum(ad.square(leaf)))
    leaf.zero_grad()
    ad.backward(ad.tensor_sum(ad.square(leaf)))
    np.testing.assert_array_equal(leaf.grad, [2, 2, 2])


def test_backward_requires_scalar():
    leaf = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.square(leaf))


def test_shared_subexpression_gradients_accumulate():
    g = grad_of(lambda t: (lambda s: ad.tensor_sum(ad.add(s, s)))(ad.square(t)), np.array([1.0, -2.0]))
    np.testing.assert_array_equal(g, [4.0, -8.0])


def test_non_finite_values_are_rejected():
    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        ad.sqrt(ad.Tensor(np.array([-1.0])))


def test_gradcheck_excludes_kink_straddling_probes():
    res = check_gradient(lambda t: ad.tensor_sum(ad.relu(t)), np.array([0.0, 5e-4, 1.0]))
    assert list(res.excluded) == [True, True, False]
    assert res.max_rel_err < 1e-9


@settings(max_examples=50)
@given(floats, floats)
def test_relative_error_symmetric_and_bounded(a, b):
    e = relative_error(a, b)
    assert e == relative_error(b, a)
    assert 0 <= e <= 2.0 * max(abs(a), abs(b)) / max(abs(a), abs(b), 1e-6) + 1e-12
