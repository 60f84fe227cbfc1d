import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from delta_uq.errors import ConfigError, DomainError, NumericError, ShapeError
from delta_uq.nn_core import (
    LayerSpec,
    ModelParams,
    forward,
    grad_loglik,
    jacobian_g,
    log_likelihood,
    logit_residual,
    mlp_layers,
    softmax,
    softmax_jacobian,
)

from conftest import central_diff, random_model, rel_err

finite = st.floats(-50, 50, allow_nan=False)


def test_parameter_count():
    layers = mlp_layers([784, 300, 100, 40, 10])
    assert sum(l.n_params for l in layers) == 785 * 300 + 301 * 100 + 101 * 40 + 41 * 10
    m = ModelParams(layers, np.zeros(sum(l.n_params for l in layers)))
    assert m.n_trailing(2) == 4450


def test_layer_chain_validation():
    with pytest.raises(ConfigError):
        ModelParams([LayerSpec(3, 4), LayerSpec(5, 2, "identity")], np.zeros(16 + 12))
    with pytest.raises(ConfigError):
        ModelParams([LayerSpec(3, 4, "relu")], np.zeros(16))
    with pytest.raises(ShapeError):
        ModelParams(mlp_layers([3, 2]), np.zeros(7))


def test_vectorization_round_trip_is_bit_exact():
    m = random_model([4, 5, 3], seed=0)
    again = ModelParams.from_weights(m.layers, m.weights())
    assert again.theta.tobytes() == m.theta.tobytes()


def test_vectorization_order_last_layer_first_column_major():
    layers = mlp_layers([2, 3, 2])
    w0 = np.arange(9.0).reshape(3, 3)
    w1 = 100 + np.arange(8.0).reshape(4, 2)
    m = ModelParams.from_weights(layers, [w0, w1])
    np.testing.assert_array_equal(m.theta[:8], w1.T.ravel())
    np.testing.assert_array_equal(m.theta[8:], w0.T.ravel())


# forward

def test_forward_zero_weights():
    m = ModelParams(mlp_layers([3, 4]), np.zeros(16))
    np.testing.assert_array_equal(forward(m, [0.3, -2.0, 7.0]), np.zeros(4))


def test_forward_identity_map():
    w = np.vstack([np.eye(3), np.zeros((1, 3))])
    m = ModelParams.from_weights(mlp_layers([3, 3]), [w])
    np.testing.assert_array_equal(forward(m, [1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])


def test_forward_two_layers_hand_computed():
    # hidden: a = [x, 1] @ W0 with W0 rows (x1, x2, bias)
    w0 = np.array([[1.0, -1.0], [0.5, 2.0], [0.1, 0.0]])
    w1 = np.array([[1.0, 0.0, 2.0], [-1.0, 1.0, 0.5], [0.0, 0.3, -0.2]])
    m = ModelParams.from_weights(mlp_layers([2, 2, 3]), [w0, w1])
    # x = (1, -1): a1 = (1 - 0.5 + 0.1, -1 - 2 + 0) = (0.6, -3.0); h1 = (0.6, 0)
    # g = (0.6*1 + 0*(-1) + 0, 0.6*0 + 0*1 + 0.3, 0.6*2 + 0*0.5 - 0.2) = (0.6, 0.3, 1.0)
    np.testing.assert_allclose(forward(m, [1.0, -1.0]), [0.6, 0.3, 1.0], rtol=0, atol=1e-15)


def test_forward_shape_error():
    m = random_model([3, 2], seed=1)
    with pytest.raises(ShapeError):
        forward(m, np.zeros(4))


# softmax

def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros(10)), np.full(10, 0.1), atol=1e-16)


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax([np.log(2.0), 0.0]), [2 / 3, 1 / 3], rtol=1e-15)


def test_softmax_temperature_limits():
    z = np.array([3.0, 0.0, 0.0])
    assert np.all(np.abs(softmax(z, 1e6) - 1 / 3) <= 1e-4)
    assert softmax(z, 1e-6)[0] >= 1 - 1e-9


def test_softmax_errors():
    with pytest.raises(NumericError):
        softmax([np.nan, 0.0])
    with pytest.raises(DomainError):
        softmax([1.0, 0.0], T=0.0)


@given(arrays(np.float64, st.integers(2, 12), elements=finite), finite)
def test_softmax_simplex_and_shift_invariance(z, c):
    p = softmax(z)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-12
    np.testing.assert_allclose(softmax(z + c), p, rtol=0, atol=1e-12)


@given(arrays(np.float64, st.integers(2, 12), elements=finite), st.floats(1e-3, 1e3))
def test_softmax_temperature_keeps_argmax(z, T):
    # exact ties may be broken differently by rounding
    assume_unique = np.sort(z)[-1] - np.sort(z)[-2] > 1e-9
    if assume_unique:
        assert np.argmax(softmax(z, T)) == np.argmax(z)


# log-likelihood

def test_log_likelihood_uniform():
    m = ModelParams(mlp_layers([4, 10]), np.zeros(50))
    assert log_likelihood(m, np.ones((1, 4)), [3]) == pytest.approx(np.log(0.1), rel=1e-15)


def test_log_likelihood_additive():
    m = random_model([4, 6, 3], seed=2)
    x = np.random.default_rng(0).standard_normal((1, 4))
    one = log_likelihood(m, x, [1])
    assert log_likelihood(m, np.vstack([x, x]), [1, 1]) == 2 * one


def test_log_likelihood_matches_naive():
    m = random_model([5, 7, 4], seed=3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((20, 5))
    y = rng.integers(0, 4, 20)
    naive = 0.0
    for xi, yi in zip(x, y):
        g = forward(m, xi)
        naive += np.log(np.exp(g[yi]) / np.exp(g).sum())
    assert log_likelihood(m, x, y) == pytest.approx(naive, rel=1e-10, abs=1e-10)


def test_log_likelihood_empty():
    m = random_model([2, 2], seed=0)
    with pytest.raises(DomainError):
        log_likelihood(m, np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_log_likelihood_rejects_bad_labels():
    m = random_model([2, 3], seed=0)
    with pytest.raises(DomainError):
        log_likelihood(m, np.zeros((1, 2)), [3])


# gradients

def test_residual_zero_for_one_hot_prediction():
    w = np.zeros((3, 3))
    w[-1] = [800.0, 0.0, 0.0]  # bias saturates class 0
    m = ModelParams.from_weights(mlp_layers([2, 3]), [w])
    np.testing.assert_array_equal(logit_residual(m, np.zeros((1, 2)), [0]), np.zeros((1, 3)))


def test_residual_zero_weights_two_classes():
    m = ModelParams(mlp_layers([3, 2]), np.zeros(8))
    np.testing.assert_array_equal(logit_residual(m, np.ones((1, 3)), [1]), [[-0.5, 0.5]])


@pytest.mark.parametrize("seed", range(3))
def test_grad_loglik_finite_differences(seed):
    m = random_model([4, 6, 5, 3], seed=seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((5, 4))
    y = rng.integers(0, 3, 5)
    fd = central_diff(lambda t: log_likelihood(m.with_theta(t), x, y), m.theta)
    assert rel_err(grad_loglik(m, x, y), fd) <= 1e-5


@pytest.mark.parametrize("r", [1, 2, 3])
def test_jacobian_finite_differences(r):
    m = random_model([3, 5, 4, 3], seed=7)
    x = np.random.default_rng(7).standard_normal(3)
    n_r = m.n_trailing(r)

    def logits_of_trailing(t):
        theta = m.theta.copy()
        theta[:n_r] = t
        return forward(m.with_theta(theta), x)

    fd = central_diff(logits_of_trailing, m.theta[:n_r])
    jac = jacobian_g(m, x, r)
    assert jac.shape == (n_r, 3)
    assert rel_err(jac, fd) <= 1e-5


def test_jacobian_last_layer_is_features():
    m = random_model([3, 4, 2], seed=4)
    x = np.array([0.2, -0.4, 1.0])
    from delta_uq.nn_core import forward_cache

    hidden, _ = forward_cache(m, x)
    hb = np.append(hidden[-1][0], 1.0)
    jac = jacobian_g(m, x, 1)
    # columns of W_L are contiguous blocks of length 5 in theta
    expected = np.zeros((10, 2))
    expected[:5, 0] = hb
    expected[5:, 1] = hb
    np.testing.assert_array_equal(jac, expected)


def test_jacobian_dead_relu_rows_are_zero():
    w0 = np.array([[1.0, -1.0], [0.0, 0.0]])  # unit 1 pre-activation = -x < 0 for x > 0
    w1 = np.array([[1.0, 2.0], [3.0, 4.0], [0.0, 0.0]])
    m = ModelParams.from_weights(mlp_layers([1, 2, 2]), [w0, w1])
    jac = jacobian_g(m, [1.0], 2)
    w0_block = jac[6:].reshape(2, 2, 2)  # (unit, input row, class)
    np.testing.assert_array_equal(w0_block[1], 0.0)
    assert np.any(w0_block[0] != 0)


def test_jacobian_full_equals_backprop_rows():
    m = random_model([3, 4, 4, 3], seed=11)
    x = np.random.default_rng(11).standard_normal((1, 3))
    from delta_uq.nn_core import _backward, forward_cache

    hidden, pre = forward_cache(m, x)
    jac = jacobian_g(m, x[0])
    for cls in range(3):
        e = np.zeros((1, 3))
        e[0, cls] = 1.0
        np.testing.assert_allclose(jac[:, cls], _backward(m, hidden, pre, e), rtol=1e-13, atol=1e-14)


def test_jacobian_batch_matches_single():
    m = random_model([3, 4, 3], seed=12)
    x = np.random.default_rng(12).standard_normal((4, 3))
    batch = jacobian_g(m, x, 2)
    for i in range(4):
        np.testing.assert_allclose(batch[i], jacobian_g(m, x[i], 2), rtol=1e-14, atol=1e-15)


def test_jacobian_rejects_bad_subset():
    m = random_model([3, 4, 3], seed=0)
    for bad in (0, 3, 1.5):
        with pytest.raises(ConfigError):
            jacobian_g(m, np.zeros(3), bad)


def test_softmax_jacobian_examples():
    np.testing.assert_array_equal(softmax_jacobian([0.5, 0.5]), [[0.25, -0.25], [-0.25, 0.25]])
    np.testing.assert_array_equal(softmax_jacobian([0.0, 1.0, 0.0]), np.zeros((3, 3)))


@settings(max_examples=25)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(-5, 5)))
def test_softmax_jacobian_finite_differences(z):
    p = softmax(z)
    jac = softmax_jacobian(p)
    assert np.all(np.abs(jac.sum(axis=0)) <= 1e-14)
    fd = central_diff(softmax, z)  # fd[i, j] = d p_j / d z_i
    np.testing.assert_allclose(jac, fd, atol=1e-8)
