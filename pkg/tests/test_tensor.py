import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gsasv.checks import primitive_errors
from gsasv.errors import NumericalError, ShapeError
from gsasv.tensor import (
    AffineParams,
    BatchNormParams,
    SReluParams,
    affine,
    affine_backward,
    batchnorm,
    batchnorm_backward,
    grad_check,
    log_softmax,
    log_softmax_backward,
    relu,
    relu_backward,
    srelu,
    srelu_backward,
)

finite = st.floats(-50, 50, allow_nan=False)


def test_affine_identity():
    p = AffineParams([[1, 0], [0, 1]], [0, 0])
    np.testing.assert_array_equal(affine(p, [[3, 4]]), [[3, 4]])


def test_affine_hand_value():
    p = AffineParams([[2, 0], [0, 2]], [1, 1])
    np.testing.assert_array_equal(affine(p, [[1, 1]]), [[3, 3]])


def test_affine_shape_error_names_shapes():
    p = AffineParams(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ShapeError, match=r"\(1, 2\).*\(2, 3\)"):
        affine(p, np.ones((1, 2)))


def test_affine_grad_check(rng):
    p = AffineParams(rng.standard_normal((2, 3)), rng.standard_normal(2))
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, 2))

    def f():
        dx, dW, db = affine_backward(p, x, w)
        return float((w * affine(p, x)).sum()), {"W": dW, "b": db, "x": dx}

    assert grad_check(f, {"W": p.W, "b": p.b, "x": x}, h=1e-6) < 1e-6


def test_relu_values():
    np.testing.assert_array_equal(relu([[-1, 2]]), [[0, 2]])
    np.testing.assert_array_equal(relu(np.zeros((2, 3))), np.zeros((2, 3)))


def test_relu_subgradient_at_zero_is_zero():
    np.testing.assert_array_equal(relu_backward(np.array([[0.0, 1.0]]), np.ones((1, 2))), [[0.0, 1.0]])


def test_srelu_hand_value():
    np.testing.assert_array_equal(srelu(SReluParams(np.array([2.0, 0.5])), [[1, -4]]), [[2, 0]])


def test_srelu_shape_error():
    with pytest.raises(ShapeError):
        srelu(SReluParams.identity(3), np.ones((1, 2)))


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_identity_srelu_is_relu(z, dout):
    p = SReluParams.identity(4)
    np.testing.assert_array_equal(srelu(p, z), relu(z))
    dz, _ = srelu_backward(p, z, dout)
    np.testing.assert_array_equal(dz, relu_backward(z, dout))


def test_batchnorm_eval_identity_stats(rng):
    p = BatchNormParams.fresh(3)
    x = rng.standard_normal((5, 3))
    out, _ = batchnorm(p, x, "eval")
    np.testing.assert_allclose(out, x / math.sqrt(1 + 1e-5), rtol=1e-14)
    np.testing.assert_allclose(out, x, atol=1e-5 * np.abs(x).max())


def test_batchnorm_train_hand_value():
    p = BatchNormParams.fresh(1, epsilon=1e-5)
    out, _ = batchnorm(p, [[0.0], [2.0]], "train")
    # mean 1, biased var 1
    np.testing.assert_allclose(out, [[-1 / math.sqrt(1 + 1e-5)], [1 / math.sqrt(1 + 1e-5)]], rtol=1e-15)


def test_batchnorm_running_stats_update():
    p = BatchNormParams.fresh(1, momentum=0.1)
    batchnorm(p, [[0.0], [2.0]], "train")
    # unbiased variance of {0, 2} is 2
    np.testing.assert_allclose(p.running_mean, [0.1])
    np.testing.assert_allclose(p.running_var, [0.9 * 1 + 0.1 * 2])


def test_batchnorm_train_needs_two_rows():
    with pytest.raises(ShapeError):
        batchnorm(BatchNormParams.fresh(2), np.ones((1, 2)), "train")


def test_batchnorm_eval_is_pure(rng):
    p = BatchNormParams.fresh(3)
    p.running_mean[:] = rng.standard_normal(3)
    p.running_var[:] = rng.uniform(0.5, 2, 3)
    before = (p.running_mean.copy(), p.running_var.copy())
    x = rng.standard_normal((4, 3))
    a, _ = batchnorm(p, x, "eval")
    b, _ = batchnorm(p, x, "eval")
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(p.running_mean, before[0])
    np.testing.assert_array_equal(p.running_var, before[1])


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_grad_check(rng, mode):
    p = BatchNormParams.fresh(4)
    p.gamma[:] = rng.uniform(0.5, 1.5, 4)
    p.beta[:] = rng.standard_normal(4)
    p.running_mean[:] = rng.standard_normal(4)
    x = rng.standard_normal((8, 4))
    w = rng.standard_normal((8, 4))

    def f():
        out, cache = batchnorm(p, x, mode, update_stats=False)
        dx, dg, db = batchnorm_backward(p, cache, w)
        return float((w * out).sum()), {"gamma": dg, "beta": db, "x": dx}

    assert grad_check(f, {"gamma": p.gamma, "beta": p.beta, "x": x}, h=1e-6) < 1e-5


def test_log_softmax_symmetric():
    np.testing.assert_allclose(log_softmax([[0, 0, 0]]), [[-math.log(3)] * 3], rtol=1e-15)


def test_log_softmax_large_logits_stable():
    out = log_softmax([[1000, 0, 0]])
    assert np.all(np.isfinite(out))
    assert abs(out[0, 0]) < 1e-12


@settings(max_examples=50)
@given(arrays(np.float64, (4, 3), elements=st.floats(-700, 700)))
def test_log_softmax_rows_normalised(x):
    out = log_softmax(x)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-12)


def test_log_softmax_grad_check(rng):
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((4, 3))

    def f():
        out = log_softmax(x)
        return float((w * out).sum()), {"x": log_softmax_backward(out, w)}

    assert grad_check(f, {"x": x}, h=1e-6) < 1e-6


def test_srelu_grad_check_wrt_scale(rng):
    p = SReluParams(rng.uniform(0.5, 2, 3))
    z = rng.standard_normal((4, 3))
    z = np.where(np.abs(z) < 1e-3, 1e-3, z)
    w = rng.standard_normal((4, 3))

    def f():
        dz, dwa = srelu_backward(p, z, w)
        return float((w * srelu(p, z)).sum()), {"wa": dwa, "z": dz}

    assert grad_check(f, {"wa": p.wa, "z": z}, h=1e-6) < 1e-6


def test_grad_check_constant_function():
    x = np.ones(3)
    assert grad_check(lambda: (5.0, {"x": np.zeros(3)}), {"x": x}) == 0.0


def test_grad_check_detects_wrong_gradient():
    x = np.array([1.0, 2.0])
    assert grad_check(lambda: (float((x**2).sum()), {"x": 3 * x}), {"x": x}) > 0.1


def test_grad_check_rejects_non_finite():
    x = np.array([1.0])
    with pytest.raises(NumericalError):
        grad_check(lambda: (float("nan"), {"x": x}), {"x": x})


def test_grad_check_restores_params(rng):
    x = rng.standard_normal(5)
    before = x.copy()
    grad_check(lambda: (float((x**3).sum()), {"x": 3 * x**2}), {"x": x})
    np.testing.assert_array_equal(x, before)


@pytest.mark.parametrize("seed", range(3))
def test_all_primitives_pass_grad_check(seed):
    errs = primitive_errors(np.random.default_rng(seed))
    assert max(errs.values()) < 1e-6, errs
