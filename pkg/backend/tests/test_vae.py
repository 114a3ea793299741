"""Tests for the Gaussian posterior, KL terms, annealing and the PI controller."""

import numpy as np
import pytest

from ml.errors import DimensionError, NumericError
from ml.numerics import RngStream, finite_diff_check
from ml.vae import (
    AnnealSchedule,
    ControllerState,
    GaussianPosterior,
    PosteriorHead,
    anneal_weight,
    encode_gaussian,
    kl_gradients,
    kl_to_standard_normal,
    pi_beta_update,
    reparameterize,
    smooth_kl,
)


def default_controller(**overrides) -> ControllerState:
    values = dict(kp=0.01, ki=0.0001, beta_min=0.0, beta_max=1.0, setpoint=3.0)
    values.update(overrides)
    return ControllerState(**values)


def test_reparameterize():
    post = GaussianPosterior(mu=np.array([[1.0, -1.0]]), log_sigma=np.log(np.array([[2.0, 0.5]])))
    z = reparameterize(post, np.array([[1.0, 2.0]]))
    assert np.allclose(z, [[3.0, 0.0]])


def test_reparameterize_shape_mismatch():
    post = GaussianPosterior(mu=np.zeros((2, 3)), log_sigma=np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        reparameterize(post, np.zeros((2, 2)))


def test_kl_of_standard_normal_is_zero():
    post = GaussianPosterior(mu=np.zeros((4, 5)), log_sigma=np.zeros((4, 5)))
    assert kl_to_standard_normal(post) == 0.0


def test_kl_closed_form_single_dim():
    # KL(N(1, 2^2) || N(0, 1)) = 1/2 (1 + 4 - 1 - ln 4)
    post = GaussianPosterior(mu=np.array([[1.0]]), log_sigma=np.log(np.array([[2.0]])))
    assert kl_to_standard_normal(post) == pytest.approx(0.5 * (4.0 - np.log(4.0)))


def test_kl_gradients_match_finite_differences():
    rng = RngStream(0)
    params = {"mu": rng.normal((3, 4)), "log_sigma": 0.3 * rng.normal((3, 4))}

    def f(p):
        post = GaussianPosterior(mu=p["mu"], log_sigma=p["log_sigma"])
        mu_grad, log_sigma_grad = kl_gradients(post)
        return kl_to_standard_normal(post), {"mu": mu_grad, "log_sigma": log_sigma_grad}

    assert finite_diff_check(f, params, tol=1e-4).passed


def test_posterior_head_backward_matches_finite_differences():
    head = PosteriorHead(5, 3, RngStream(1))
    rng = RngStream(2)
    h = rng.normal((4, 5))
    mu_w, sigma_w = rng.normal((4, 3)), rng.normal((4, 3))

    def f(params):
        post = encode_gaussian(head, h)
        value = float(np.sum(post.mu * mu_w) + np.sum(post.log_sigma * sigma_w))
        grads, _ = head.backward(h, mu_w, sigma_w, "post.")
        return value, grads

    assert finite_diff_check(f, head.parameters("post."), tol=1e-4).passed


def test_anneal_weight():
    sched = AnnealSchedule(ramp=100)
    assert anneal_weight(0, sched) == 0.0
    assert anneal_weight(50, sched) == pytest.approx(0.5)
    assert sched.weight(500) == 1.0
    assert anneal_weight(10, AnnealSchedule(ramp=0)) == 1.0


def test_controller_zero_error_with_default_gains():
    state = default_controller()
    assert pi_beta_update(state, 3.0) == pytest.approx(0.005)
    assert state.updates == 1


def test_controller_starts_at_beta_min():
    assert default_controller(beta_min=0.1).beta == pytest.approx(0.1)


def test_controller_kl_above_setpoint_raises_beta_until_clamp():
    state = default_controller(beta_max=0.02)
    betas = [pi_beta_update(state, 10.0) for _ in range(30)]
    assert all(b2 > b1 for b1, b2 in zip(betas, betas[1:]) if b1 < 0.02)
    assert betas[-1] == pytest.approx(0.02)
    assert all(0.0 <= b <= 0.02 for b in betas)


def test_controller_kl_below_setpoint_lowers_beta_to_floor():
    state = default_controller()
    betas = [pi_beta_update(state, 0.0) for _ in range(10)]
    assert all(b2 <= b1 for b1, b2 in zip(betas, betas[1:]))
    assert betas[-1] == 0.0


def test_controller_stays_in_bounds_under_noise():
    state = default_controller(beta_min=0.01, beta_max=0.5)
    rng = RngStream(3)
    for kl in 3.0 + 5.0 * rng.normal(500):
        beta = pi_beta_update(state, float(kl))
        assert 0.01 <= beta <= 0.5


def test_anti_windup_holds_integral_while_saturated():
    plain = default_controller(beta_max=0.02)
    held = default_controller(beta_max=0.02, anti_windup=True)
    for _ in range(200):
        pi_beta_update(plain, 10.0)
        pi_beta_update(held, 10.0)
    assert plain.beta == held.beta == pytest.approx(0.02)
    assert abs(held.error_sum) < abs(plain.error_sum)


def test_controller_rejects_non_finite_kl():
    with pytest.raises(NumericError):
        pi_beta_update(default_controller(), float("inf"))


def test_smooth_kl_initializes_then_averages():
    state = default_controller(smoothing=0.9)
    assert smooth_kl(state, 5.0) == 5.0
    assert smooth_kl(state, 15.0) == pytest.approx(6.0)
    with pytest.raises(NumericError):
        smooth_kl(state, float("nan"))


def test_controller_kl_above_setpoint_first_step():
    # e = -1: 0.01 / (1 + e^-1) + 0.0001
    assert pi_beta_update(default_controller(), 4.0) == pytest.approx(0.007411, abs=1e-6)


def test_controller_settles_on_monotone_plant():
    # KL falls as beta rises; KL = 3 at beta = 0.02 ln 2
    def plant(beta):
        return 6.0 * np.exp(-beta / 0.02)

    state = default_controller()
    kl = plant(state.beta)
    trace = []
    for _ in range(3000):
        kl = plant(pi_beta_update(state, kl))
        trace.append(kl)
    assert np.all(np.abs(np.array(trace[-200:]) - 3.0) <= 0.3)


def test_kl_closed_form_matches_monte_carlo():
    mu = np.array([[1.5, -2.0, 1.0, 2.5]])
    sigma = np.array([[0.5, 1.2, 0.8, 1.5]])
    post = GaussianPosterior(mu=mu, log_sigma=np.log(sigma))
    eps = RngStream(7).normal((100_000, 4))
    z = mu + sigma * eps
    # log q(z) - log p(z) per sample, constants cancel
    log_ratio = np.sum(-np.log(sigma) - 0.5 * eps ** 2 + 0.5 * z ** 2, axis=1)
    assert kl_to_standard_normal(post) == pytest.approx(log_ratio.mean(), rel=0.01)


def test_reparameterize_preserves_mean():
    n = 100_000
    mu = np.tile([1.0, -2.0, 3.0], (n, 1))
    log_sigma = np.log(np.tile([0.5, 0.5, 1.0], (n, 1)))
    z = reparameterize(GaussianPosterior(mu=mu, log_sigma=log_sigma), RngStream(8).normal((n, 3)))
    assert np.allclose(z.mean(axis=0), [1.0, -2.0, 3.0], rtol=0.01)
