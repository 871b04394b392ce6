import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eclstm import functional as F
from eclstm.autograd import Tensor, parameter, stack
from eclstm.functional import BatchNormState, ConvSpec, GeometryError
from eclstm.gradcheck import check_gradients


def T(a):
    return Tensor(np.asarray(a, dtype=float))


# -- activations ---------------------------------------------------------------

def test_sigmoid_at_zero():
    assert F.apply_activation("sigmoid", T([0.0])).data[0] == 0.5


def test_hard_sigmoid_saturates():
    out = F.apply_activation("hard_sigmoid", T([-3.0, 3.0])).data
    assert out.tolist() == [0.0, 1.0]


def test_leaky_relu_slope():
    assert F.apply_activation("leaky_relu", T([-2.0])).data[0] == pytest.approx(-0.02, abs=1e-15)


def test_sigmoid_is_stable_for_large_inputs():
    out = F.sigmoid(T([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    assert out.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("kind", ["sigmoid", "relu", "leaky_relu", "linear", "hard_sigmoid", "tanh"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(1)
    x = rng.uniform(0.1, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    p = parameter(x)
    r = rng.normal(size=x.shape)
    assert check_gradients(lambda: (F.apply_activation(kind, p) * r).sum(), [p]) < 1e-6


# -- convolutions -------------------------------------------------------------------

def test_early_hand_convolution():
    x = T(np.array([[1, 0], [2, 0], [3, 0], [4, 0]])[None])
    spec = ConvSpec("early", kernel_width=2, filters=1)
    w = T(np.array([[[1.0], [0.0]], [[1.0], [0.0]]]))       # (k=2, C=2, f=1)
    out = F.conv1d_early(x, spec, w, T([0.0]))
    assert out.data[0, :, 0].tolist() == [3.0, 5.0, 7.0]


def test_early_identity_kernel():
    rng = np.random.default_rng(0)
    x = T(rng.normal(size=(2, 5, 3)))
    spec = ConvSpec("early", kernel_width=1, filters=3)
    out = F.conv1d_early(x, spec, T(np.eye(3)[None]), T(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


def test_early_folds_three_dimensional_input():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 3, 2))
    spec = ConvSpec("early", kernel_width=2, filters=4)
    w, b = T(rng.normal(size=(2, 6, 4))), T(rng.normal(size=4))
    a = F.conv1d_early(T(x), spec, w, b).data
    c = F.conv1d_early(T(x.reshape(2, 5, 6)), spec, w, b).data
    np.testing.assert_array_equal(a, c)


def test_fig4_geometry():
    assert F.conv_output_length(12, 3, stride=2, dilation=2) == 4
    x = T(np.arange(12.0).reshape(1, 12, 1))
    spec = ConvSpec("early", kernel_width=3, stride=2, dilation=2, filters=1)
    out = F.conv1d_early(x, spec, T(np.ones((3, 1, 1))), T([0.0]))
    assert out.shape == (1, 4, 1)
    # taps at 0,2,4 then stride 2
    assert out.data[0, :, 0].tolist() == [6.0, 12.0, 18.0, 24.0]


def test_late_hand_convolution():
    x = T(np.array([[1, 1], [2, 1], [3, 1]], dtype=float)[None, :, :, None])   # (1, w=3, F=2, C=1)
    spec = ConvSpec("late", kernel_width=2, filters=1)
    w = np.zeros((2, 2, 1, 1))
    w[0, :, 0, 0] = [1, 1]
    w[1, :, 0, 0] = [2, 2]
    out = F.conv1d_late(x, spec, T(w), T(np.zeros((2, 1))))
    assert out.data[0, :, 0, 0].tolist() == [3.0, 5.0]
    assert out.data[0, :, 1, 0].tolist() == [4.0, 4.0]


def test_late_identity_per_feature():
    rng = np.random.default_rng(3)
    x = T(rng.normal(size=(2, 4, 3, 1)))
    spec = ConvSpec("late", kernel_width=1, filters=1)
    out = F.conv1d_late(x, spec, T(np.ones((3, 1, 1, 1))), T(np.zeros((3, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_late_parameter_count():
    for nf, k, c, f in [(2, 2, 1, 1), (5, 3, 2, 4), (24, 4, 1, 10)]:
        spec = ConvSpec("late", kernel_width=k, filters=f)
        assert F.conv_param_count(spec, c, nf) == nf * k * c * f + nf * f


def test_hybrid_hand_convolution():
    x = T(np.array([[1, 1], [2, 1], [3, 1]], dtype=float)[None, :, :, None])
    spec = ConvSpec("hybrid", kernel_width=2, filters=1)
    out = F.conv1d_hybrid(x, spec, T(np.ones((2, 1, 1))), T([0.0]))
    assert out.data[0, :, 0, 0].tolist() == [3.0, 5.0]
    assert out.data[0, :, 1, 0].tolist() == [2.0, 2.0]


def test_hybrid_equals_late_with_tied_kernels():
    rng = np.random.default_rng(7)
    x = T(rng.normal(size=(3, 6, 4, 2)))
    spec_h = ConvSpec("hybrid", kernel_width=3, filters=5, padding="same")
    spec_l = ConvSpec("late", kernel_width=3, filters=5, padding="same")
    w, b = rng.normal(size=(3, 2, 5)), rng.normal(size=5)
    hy = F.conv1d_hybrid(x, spec_h, T(w), T(b)).data
    la = F.conv1d_late(x, spec_l, T(np.broadcast_to(w, (4, 3, 2, 5))), T(np.broadcast_to(b, (4, 5)))).data
    np.testing.assert_allclose(hy, la, rtol=0, atol=1e-13)


def test_hybrid_parameter_count_ignores_features_and_window():
    spec = ConvSpec("hybrid", kernel_width=4, filters=10)
    counts = {F.conv_param_count(spec, 1, nf) for nf in (1, 5, 24, 100)}
    assert counts == {4 * 1 * 10 + 10}


def test_kernel_longer_than_input_is_geometry_error():
    spec = ConvSpec("early", kernel_width=5, filters=1)
    with pytest.raises(GeometryError):
        F.conv1d_early(T(np.zeros((1, 4, 1))), spec, T(np.zeros((5, 1, 1))), T([0.0]))


@settings(max_examples=200, deadline=None)
@given(length=st.integers(1, 60), k=st.integers(1, 8), s=st.integers(1, 5), d=st.integers(1, 4))
def test_valid_length_formula(length, k, s, d):
    expected = math.floor((length - d * (k - 1) - 1) / s) + 1
    spec = ConvSpec("early", kernel_width=k, stride=s, dilation=d, filters=1)
    x = T(np.zeros((1, length, 1)))
    w, b = T(np.zeros((k, 1, 1))), T([0.0])
    if expected < 1:
        with pytest.raises(GeometryError):
            F.conv1d_early(x, spec, w, b)
    else:
        assert F.conv1d_early(x, spec, w, b).shape[1] == expected == spec.output_length(length)


@settings(max_examples=50, deadline=None)
@given(length=st.integers(1, 30), k=st.integers(1, 9), d=st.integers(1, 4),
       fusion=st.sampled_from(["early", "late", "hybrid"]))
def test_same_padding_preserves_length(length, k, d, fusion):
    spec = ConvSpec(fusion, kernel_width=k, dilation=d, filters=2, padding="same")
    x = T(np.ones((1, length, 3, 1)))
    wshape, bshape = F.conv_weight_shapes(spec, 3 if fusion == "early" else 1, 3)
    out = F.conv1d(x, spec, T(np.ones(wshape)), T(np.zeros(bshape)))
    assert out.shape[1] == length


def test_same_padding_rejects_stride():
    with pytest.raises(F.ConfigError):
        ConvSpec("early", kernel_width=3, stride=2, padding="same")


@pytest.mark.parametrize("fusion", ["early", "late", "hybrid"])
@pytest.mark.parametrize("padding,stride,dilation", [("valid", 1, 1), ("valid", 2, 2), ("same", 1, 2)])
def test_convolution_gradients(fusion, padding, stride, dilation):
    rng = np.random.default_rng(11)
    spec = ConvSpec(fusion, kernel_width=3, stride=stride, dilation=dilation, filters=2, padding=padding)
    x = parameter(rng.normal(size=(2, 9, 3, 2)))
    c_in = 6 if fusion == "early" else 2
    wshape, bshape = F.conv_weight_shapes(spec, c_in, 3)
    w, b = parameter(rng.normal(size=wshape)), parameter(rng.normal(size=bshape))
    out_shape = F.conv1d(x, spec, w, b).shape
    r = rng.normal(size=out_shape)
    assert check_gradients(lambda: (F.conv1d(x, spec, w, b) * r).sum(), [x, w, b]) < 1e-6


# -- pooling ------------------------------------------------------------------------

def test_maxpool_values():
    assert F.maxpool1d(T([[1.0, 3.0, 2.0, 5.0]]), 2).data.tolist() == [[3.0, 5.0]]


def test_maxpool_identity():
    x = T(np.arange(6.0).reshape(1, 6))
    np.testing.assert_array_equal(F.maxpool1d(x, 1).data, x.data)


def test_maxpool_tie_routes_to_first():
    x = parameter([[1.0, 1.0, 1.0, 1.0]])
    out = F.maxpool1d(x, 2)
    assert out.data.tolist() == [[1.0, 1.0]]
    out.sum().backward()
    assert x.grad.tolist() == [[1.0, 0.0, 1.0, 0.0]]


def test_maxpool_too_wide():
    with pytest.raises(GeometryError):
        F.maxpool1d(T([[1.0, 2.0]]), 3)


def test_maxpool_gradient():
    rng = np.random.default_rng(5)
    x = parameter(rng.permutation(40).reshape(2, 10, 2).astype(float))
    r = rng.normal(size=(2, 3, 2))
    assert check_gradients(lambda: (F.maxpool1d(x, 3) * r).sum(), [x]) < 1e-8


# -- batch norm ------------------------------------------------------------------------

def test_batch_norm_standardizes():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(64, 7, 3))
    raw = (raw - raw.mean(axis=(0, 1))) / raw.std(axis=(0, 1)) * 2.0 + 5.0
    out = F.batch_norm(T(raw), BatchNormState(3), train=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 1)), 0.0, atol=1e-6)
    # the eps floor shrinks the variance to s^2 / (s^2 + eps)
    np.testing.assert_allclose(out.var(axis=(0, 1)), 4.0 / (4.0 + 1e-5), rtol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 1)), 1.0, atol=1e-5 / 4.0 + 1e-12)


def test_batch_norm_constant_channel():
    out = F.batch_norm(T(np.full((4, 5, 2), 3.0)), BatchNormState(2), train=True).data
    assert np.all(out == 0.0)


def test_batch_norm_running_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(10, 4, 2))
    state = BatchNormState(2)
    F.batch_norm(T(x), state, train=True)
    mu, var = x.mean(axis=(0, 1)), x.var(axis=(0, 1))
    np.testing.assert_allclose(state.running_mean, 0.1 * mu, rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var, rtol=1e-12)
    out = F.batch_norm(T(x), state, train=False).data
    np.testing.assert_allclose(out, (x - 0.1 * mu) / np.sqrt(0.9 + 0.1 * var + 1e-5), rtol=1e-12)


def test_batch_norm_infer_before_training():
    with pytest.raises(RuntimeError):
        F.batch_norm(T(np.zeros((2, 3))), BatchNormState(3), train=False)


@pytest.mark.parametrize("train", [True, False])
def test_batch_norm_gradients(train):
    rng = np.random.default_rng(2)
    state = BatchNormState(3)
    F.batch_norm(T(rng.normal(size=(4, 5, 3))), state, train=True)
    state.gamma.data[:] = rng.normal(size=3)
    state.beta.data[:] = rng.normal(size=3)
    x = parameter(rng.normal(size=(4, 5, 3)))
    r = rng.normal(size=x.shape)
    err = check_gradients(lambda: (F.batch_norm(x, state, train) * r).sum(), [x, state.gamma, state.beta])
    assert err < 1e-6


# -- dropout, dense, concat --------------------------------------------------------------

def test_dropout_identities():
    x = T(np.arange(10.0))
    assert F.dropout(x, 0.0, True, np.random.default_rng(0)) is x
    assert F.dropout(x, 0.9, False) is x


def test_dropout_rate_range():
    with pytest.raises(F.ConfigError):
        F.dropout(T([1.0]), 0.995, True, np.random.default_rng(0))
    with pytest.raises(F.ConfigError):
        F.dropout(T([1.0]), -0.1, False)


def test_dropout_statistics():
    x = T(np.ones(100_000))
    out = F.dropout(x, 0.5, True, np.random.default_rng(42)).data
    survivors = out != 0
    assert abs(survivors.mean() - 0.5) < 0.01
    assert np.all(out[survivors] == 2.0)
    assert abs(out.mean() - 1.0) < 0.02


def test_dropout_gradient_uses_mask():
    x = parameter(np.ones(20))
    F.dropout(x, 0.3, True, np.random.default_rng(0)).sum().backward()
    mask = F.dropout(T(np.ones(20)), 0.3, True, np.random.default_rng(0)).data
    np.testing.assert_array_equal(x.grad, mask)


def test_dense_identity():
    x = T(np.array([[1.5, -2.0, 0.3]]))
    out = F.dense(x, T(np.eye(3)), T(np.zeros(3)))
    np.testing.assert_array_equal(out.data, x.data)


def test_dense_hand_product():
    # y = W x + b with W = [[1,1],[0,1]]; weights are stored input-major
    w = np.array([[1.0, 1.0], [0.0, 1.0]])
    out = F.dense(T([[1.0, 2.0]]), T(w.T), T([0.0, 1.0]))
    assert out.data.tolist() == [[3.0, 3.0]]


def test_dense_single_output_unit():
    rng = np.random.default_rng(0)
    out = F.dense(T(rng.normal(size=(5, 7))), T(rng.normal(size=(7, 1))), T([0.0]))
    assert out.shape == (5, 1)


def test_dense_dimension_mismatch():
    with pytest.raises(ValueError):
        F.dense(T(np.zeros((2, 3))), T(np.zeros((4, 1))), T([0.0]))


def test_concat_shapes():
    a2, b2 = T(np.zeros((1, 6, 2))), T(np.zeros((1, 6, 3)))
    assert F.concat_channels(a2, b2, "early").shape == (1, 6, 5)
    a3, b3 = T(np.zeros((1, 6, 4, 2))), T(np.zeros((1, 6, 4, 3)))
    assert F.concat_channels(a3, b3, "late").shape == (1, 6, 4, 5)
    h = T(np.zeros((1, 6, 7)))
    assert F.concat_channels(a3, h, "early").shape == (1, 6, 4 * 2 + 7)
    assert F.concat_shape((6, 4, 2), (6, 7), F.FusionKind.EARLY) == (6, 15)


def test_concat_irreconcilable():
    with pytest.raises(GeometryError):
        F.concat_channels(T(np.zeros((1, 6, 4, 2))), T(np.zeros((1, 6, 3))), "late")


def test_concat_gradient_splits_exactly():
    a, b = parameter(np.ones((1, 3, 2))), parameter(np.ones((1, 3, 3)))
    r = np.arange(15.0).reshape(1, 3, 5)
    (F.concat_channels(a, b, "early") * r).sum().backward()
    np.testing.assert_array_equal(a.grad, r[..., :2])
    np.testing.assert_array_equal(b.grad, r[..., 2:])


# -- initialization -------------------------------------------------------------------------

def test_glorot_bounds():
    w = F.glorot_init((100, 100), 0)
    limit = math.sqrt(6 / 200)
    assert np.all(np.abs(w) <= limit)
    assert np.abs(w).max() > 0.95 * limit
    assert abs(w.mean()) < 0.01


def test_glorot_determinism():
    np.testing.assert_array_equal(F.glorot_init((3, 4, 5), 9), F.glorot_init((3, 4, 5), 9))
    assert not np.array_equal(F.glorot_init((3, 4, 5), 9), F.glorot_init((3, 4, 5), 10))
