"""Tests for the dense numerics: nets, Adam, sampling and the gradient checker."""

import numpy as np
import pytest

from ml.errors import ConfigurationError, DimensionError, NumericError
from ml.numerics import (
    AdamState,
    FeedForwardNet,
    RngStream,
    adam_step,
    finite_diff_check,
    gaussian_sample,
    to_storage_precision,
)


def _net_objective(net, x, weights):
    """f(params) = <net(x), weights> with analytic gradients."""
    def f(params):
        value = float(np.sum(net.forward(x) * weights))
        grads, _ = net.backward(x, weights)
        return value, grads
    return f


def test_zero_weight_net_returns_output_bias():
    net = FeedForwardNet([3, 4, 2])
    net.biases[-1][...] = [0.5, -1.0]
    out = net.forward(np.array([[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]]))
    assert np.array_equal(out, [[0.5, -1.0], [0.5, -1.0]])


def test_identity_net_passes_input_through():
    net = FeedForwardNet([1, 1])
    net.weights[0][...] = 1.0
    assert net.forward(np.array([[2.5]]))[0, 0] == 2.5


def test_ones_net_at_zero_input_is_zero():
    net = FeedForwardNet([1, 2, 1])
    for w in net.weights:
        w[...] = 1.0
    assert net.forward(np.zeros((1, 1)))[0, 0] == 0.0


def test_parameter_count():
    net = FeedForwardNet([5, 7, 3])
    assert net.parameter_count == 5 * 7 + 7 + 7 * 3 + 3
    assert sum(p.size for p in net.parameters().values()) == net.parameter_count


def test_forward_accepts_leading_batch_dims():
    net = FeedForwardNet([4, 6, 2], RngStream(3))
    x = RngStream(4).normal((2, 5, 4))
    out = net.forward(x)
    assert out.shape == (2, 5, 2)
    assert np.allclose(out.reshape(-1, 2), net.forward(x.reshape(-1, 4)))


def test_forward_rejects_wrong_width():
    with pytest.raises(DimensionError):
        FeedForwardNet([3, 2]).forward(np.zeros((1, 4)))


def test_invalid_widths():
    with pytest.raises(ConfigurationError):
        FeedForwardNet([3])
    with pytest.raises(ConfigurationError):
        FeedForwardNet([3, 0, 2])


def test_backward_zero_output_grad_gives_zero_gradients():
    net = FeedForwardNet([3, 5, 2], RngStream(0))
    x = RngStream(1).normal((4, 3))
    grads, input_grad = net.backward(x, np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads.values())
    assert np.all(input_grad == 0)


def test_backward_linear_product_rule():
    net = FeedForwardNet([1, 1])
    net.weights[0][...] = 0.7
    grads, input_grad = net.backward(np.array([[3.0]]), np.array([[1.0]]))
    assert grads["W0"][0, 0] == pytest.approx(3.0)
    assert grads["b0"][0] == pytest.approx(1.0)
    assert input_grad[0, 0] == pytest.approx(0.7)


def test_backward_rejects_wrong_output_grad_shape():
    net = FeedForwardNet([3, 2])
    with pytest.raises(DimensionError):
        net.backward(np.zeros((4, 3)), np.zeros((4, 3)))


def test_tanh_net_gradients_match_finite_differences():
    net = FeedForwardNet([1, 3, 1], RngStream(1))
    x = np.array([[0.3], [-1.2]])
    weights = np.array([[1.0], [0.5]])
    report = finite_diff_check(_net_objective(net, x, weights), net.parameters(), tol=1e-4)
    assert report.passed
    assert report.n_checked == net.parameter_count


def test_deeper_net_input_gradient_matches_finite_differences():
    net = FeedForwardNet([4, 6, 6, 3], RngStream(2))
    weights = RngStream(5).normal((2, 3))

    def f(params):
        x = params["x"]
        value = float(np.sum(net.forward(x) * weights))
        _, input_grad = net.backward(x, weights)
        return value, {"x": input_grad}

    report = finite_diff_check(f, {"x": RngStream(6).normal((2, 4))}, tol=1e-4)
    assert report.passed


def test_adam_zero_gradients_leave_params_unchanged():
    state = AdamState(lr=0.01)
    params = {"w": np.array([1.0, -2.0])}
    adam_step(state, params, {"w": np.zeros(2)})
    assert np.array_equal(params["w"], [1.0, -2.0])
    assert state.step == 1
    assert np.all(state.m["w"] == 0)


def test_adam_first_step_moves_by_learning_rate():
    state = AdamState(lr=0.01)
    params = {"w": np.array([0.5])}
    adam_step(state, params, {"w": np.array([3.0])})
    assert params["w"][0] == pytest.approx(0.5 - 0.01, abs=1e-9)


def test_adam_two_constant_steps():
    state = AdamState(lr=0.01)
    params = {"w": np.array([0.0])}
    for _ in range(2):
        adam_step(state, params, {"w": np.array([1.0])})
    assert params["w"][0] == pytest.approx(-0.02, abs=1e-6)
    assert state.step == 2


def test_adam_non_finite_gradient_names_parameter_and_mutates_nothing():
    state = AdamState(lr=0.01)
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    with pytest.raises(NumericError) as excinfo:
        adam_step(state, params, {"a": np.array([1.0]), "b": np.array([np.nan])})
    assert excinfo.value.name == "b"
    assert params["a"][0] == 1.0
    assert state.step == 0


def test_adam_rejects_mismatched_names():
    with pytest.raises(DimensionError):
        adam_step(AdamState(), {"a": np.zeros(1)}, {"b": np.zeros(1)})


def test_adam_storage_precision_rounds_to_float32():
    state = AdamState(lr=1e-3)
    params = {"w": np.array([0.1, 0.2])}
    adam_step(state, params, {"w": np.array([0.3, -0.7])}, storage_precision=True)
    for array in (params["w"], state.m["w"], state.v["w"]):
        assert np.array_equal(array, array.astype(np.float32).astype(np.float64))


def test_to_storage_precision_is_in_place():
    array = np.array([1.0 / 3.0])
    result = to_storage_precision(array)
    assert result is array
    assert array[0] == float(np.float32(1.0 / 3.0))


def test_gaussian_sample_moments():
    x = gaussian_sample(RngStream(0), 100_000)
    assert -0.02 <= x.mean() <= 0.02
    assert 0.98 <= x.var() <= 1.02


def test_gaussian_sample_determinism():
    assert np.array_equal(gaussian_sample(RngStream(7), (3, 4)), gaussian_sample(RngStream(7), (3, 4)))
    assert not np.array_equal(gaussian_sample(RngStream(7), (3, 4)), gaussian_sample(RngStream(8), (3, 4)))


def test_rng_child_streams_differ_and_are_reproducible():
    parent = RngStream(5)
    assert np.array_equal(parent.child(1).normal(4), RngStream(5).child(1).normal(4))
    assert not np.array_equal(parent.child(1).normal(4), parent.child(2).normal(4))


def test_rng_state_round_trip():
    rng = RngStream(11)
    rng.normal(10)
    blob = rng.get_state()
    expected = rng.normal(5)
    rng.set_state(blob)
    assert np.array_equal(rng.normal(5), expected)


def test_negative_seed_rejected():
    with pytest.raises(ConfigurationError):
        RngStream(-1)


def test_finite_diff_square():
    def f(params):
        x = params["x"]
        return float(x[0] ** 2), {"x": 2.0 * x}

    report = finite_diff_check(f, {"x": np.array([3.0])}, tol=1e-6)
    assert report.passed
    assert report.max_rel_error < 1e-6


def test_finite_diff_constant():
    def f(params):
        return 4.0, {"x": np.zeros_like(params["x"])}

    report = finite_diff_check(f, {"x": np.array([1.0, 2.0])})
    assert report.passed
    assert report.max_rel_error == 0.0


def test_finite_diff_catches_wrong_gradient():
    def f(params):
        x = params["x"]
        return float(x[0] ** 2), {"x": 3.0 * x}

    report = finite_diff_check(f, {"x": np.array([1.5])})
    assert not report.passed
    assert report.worst_param == "x[0]"


def test_finite_diff_non_finite_objective():
    def f(params):
        return float("nan"), {}

    with pytest.raises(NumericError):
        finite_diff_check(f, {"x": np.array([1.0])})


def test_finite_diff_rejects_non_positive_tol():
    with pytest.raises(ConfigurationError):
        finite_diff_check(lambda p: (0.0, {}), {"x": np.zeros(1)}, tol=0.0)
