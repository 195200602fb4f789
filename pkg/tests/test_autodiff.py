import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relpose import autodiff as ad
from relpose.errors import ContractError, NumericalError, ShapeError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.constant(0.0)).item() == 0.5


def test_add_vectors():
    np.testing.assert_array_equal(ad.add(ad.constant([1, 2]), ad.constant([3, 4])).data, [4, 6])


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(ad.constant([1, 2]), ad.constant([1, 2, 3]))


def test_sigmoid_16_against_decimal():
    getcontext().prec = 40
    expect = Decimal(1) / (Decimal(1) + Decimal(-16).exp())
    assert abs(ad.sigmoid(ad.constant(16.0)).item() - float(expect)) < 1e-16


def test_softmax_uniform_65():
    out = ad.softmax_axis(ad.constant(np.zeros(65)))
    np.testing.assert_allclose(out.data, 1 / 65, rtol=0, atol=1e-15)


def test_softmax_saturates():
    out = ad.softmax_axis(ad.constant([1000.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1, 0, 0], atol=1e-300)


def test_softmax_two_logits():
    e1, e2 = math.exp(1), math.exp(2)
    out = ad.softmax_axis(ad.constant([1.0, 2.0])).data
    np.testing.assert_allclose(out, [e1 / (e1 + e2), e2 / (e1 + e2)], rtol=1e-15)
    assert abs(out[0] - 0.26894142) < 1e-8


def test_softmax_channel_range_ignores_rest():
    x = ad.constant([1.0, 2.0, 50.0])
    out = ad.softmax_axis(x, channel_range=(0, 2)).data
    assert out.shape == (2,)
    np.testing.assert_allclose(out.sum(), 1.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    out = ad.softmax_axis(ad.constant(x), axis=1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_reductions():
    assert ad.reduce("sum", ad.constant([1.0, 2.0, 3.0])).item() == 6
    assert ad.reduce("weighted-sum", ad.constant([1.0, 3.0]), weights=np.array([0.5, 0.5])).item() == 2
    u = ad.softmax_axis(ad.constant(np.zeros(65)))
    assert abs(ad.reduce("mean", u).item() - 1 / 65) < 1e-15


def test_conv_identity_and_zero(rng):
    x = ad.constant(rng.normal(size=(3, 4, 5, 2)))
    eye = np.zeros((1, 1, 1, 2, 2))
    eye[0, 0, 0] = np.eye(2)
    np.testing.assert_array_equal(ad.conv3d(x, ad.constant(eye)).data, x.data)
    assert not ad.conv3d(x, ad.constant(np.zeros((3, 3, 3, 2, 4)))).data.any()


def test_conv_ones_on_one_hot():
    x = np.zeros((5, 5, 5, 1))
    x[2, 2, 2, 0] = 1
    out = ad.conv3d(ad.constant(x), ad.constant(np.ones((3, 3, 3, 1, 1)))).data[..., 0]
    expect = np.zeros((5, 5, 5))
    expect[1:4, 1:4, 1:4] = 1
    np.testing.assert_array_equal(out, expect)


def _conv_oracle(x, k, stride):
    # direct loops over output voxels
    kk = k.shape[0]
    p = (kk - 1) // 2
    xp = np.pad(x, [(p, p)] * 3 + [(0, 0)])
    dims = [-(-n // stride) for n in x.shape[:3]]
    out = np.zeros(dims + [k.shape[4]])
    for a in range(dims[0]):
        for b in range(dims[1]):
            for c in range(dims[2]):
                patch = xp[a * stride:a * stride + kk, b * stride:b * stride + kk, c * stride:c * stride + kk]
                out[a, b, c] = np.einsum("xyzi,xyzio->o", patch, k)
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loop_oracle(rng, stride):
    x = rng.normal(size=(4, 5, 3, 2))
    k = rng.normal(size=(3, 3, 3, 2, 3))
    out = ad.conv3d(ad.constant(x), ad.constant(k), stride).data
    np.testing.assert_allclose(out, _conv_oracle(x, k, stride), atol=1e-12)


def _scatter_oracle(x, k):
    kk = k.shape[0]
    p = max((kk - 2) // 2, 0)
    dims = [2 * n for n in x.shape[:3]]
    out = np.zeros(dims + [k.shape[4]])
    for i in np.ndindex(*x.shape[:3]):
        for a in np.ndindex(kk, kk, kk):
            o = [2 * i[d] + a[d] - p for d in range(3)]
            if all(0 <= o[d] < dims[d] for d in range(3)):
                out[tuple(o)] += x[i] @ k[a]
    return out


def test_transposed_conv_scatter_oracle(rng):
    x = rng.normal(size=(2, 2, 2, 3))
    k = rng.normal(size=(2, 2, 2, 3, 2))
    out = ad.transposed_conv3d(ad.constant(x), ad.constant(k)).data
    assert out.shape == (4, 4, 4, 2)
    np.testing.assert_allclose(out, _scatter_oracle(x, k), atol=1e-12)


def test_transposed_conv_single_voxel_and_zero():
    k = np.zeros((2, 2, 2, 1, 1))
    k[0, 0, 0] = 1
    out = ad.transposed_conv3d(ad.constant(np.full((1, 1, 1, 1), 3.0)), ad.constant(k)).data
    assert out[0, 0, 0, 0] == 3 and out.sum() == 3
    assert not ad.transposed_conv3d(ad.constant(np.zeros((2, 2, 2, 1))), ad.constant(np.ones((2, 2, 2, 1, 1)))).data.any()


def test_transposed_conv_output_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.transposed_conv3d(ad.constant(np.zeros((2, 2, 2, 1))), ad.constant(np.ones((2, 2, 2, 1, 1))),
                             output_shape=(3, 4, 4))


def test_grad_of_sum_is_ones():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.backward(ad.reduce("sum", x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_sigmoid_grad_quarter():
    x = ad.parameter(0.0)
    ad.backward(ad.sigmoid(x))
    assert x.grad == 0.25


def test_tape_accumulate_flag():
    x = ad.parameter(2.0)
    tape = ad.Tape(ad.mul(x, x), accumulate=False)
    tape.backward()
    assert x.grad == 4.0
    with pytest.raises(ContractError):
        tape.backward()


def test_non_scalar_backward_rejected():
    with pytest.raises(ContractError):
        ad.Tape(ad.parameter(np.ones(3)))


def test_non_finite_forward_raises():
    with pytest.raises(NumericalError):
        ad.log(ad.constant(0.0))


def test_composite_gradcheck(rng):
    x = ad.parameter(rng.normal(size=(3, 4, 4, 2)))
    k = ad.parameter(0.3 * rng.normal(size=(3, 3, 3, 2, 2)))
    ku = ad.parameter(0.3 * rng.normal(size=(2, 2, 2, 2, 2)))
    slope = ad.parameter(np.array([0.25, 0.4]))

    def loss():
        h = ad.conv3d(x, k, stride=2)
        h = ad.prelu(h, slope)
        up = ad.transposed_conv3d(h, ku)[:3]
        s = ad.softmax_axis(up, axis=2)
        return ad.reduce("sum", ad.mul(ad.sigmoid(s), s))

    assert ad.gradcheck(loss, [x, k, ku, slope], 100, rng) < 1e-4


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4,), elements=finite), arrays(np.float64, (4,), elements=st.floats(0.5, 5)))
def test_elementwise_grads_property(a, b):
    pa, pb = ad.parameter(a), ad.parameter(b)

    def loss():
        return ad.reduce("sum", ad.add(ad.mul(ad.exp(ad.mul(pa, 0.3)), ad.div(pa, pb)), ad.sqrt(pb)))

    assert ad.gradcheck(loss, [pa, pb], 8, np.random.default_rng(0)) < 1e-4


def test_bilinear_sample_interpolates_plane():
    img = np.add.outer(2.0 * np.arange(5), 3.0 * np.arange(6))
    c = ad.parameter(np.array([[1.25, 2.5], [3.0, 0.75]]))
    out = ad.bilinear_sample(img, c)
    np.testing.assert_allclose(out.data, 2 * c.data[:, 0] + 3 * c.data[:, 1])
    ad.backward(ad.reduce("sum", out))
    np.testing.assert_allclose(c.grad, [[2, 3], [2, 3]])
