"""
Gaussian style posterior and KL weighting.

Posterior heads, the reparameterization, the closed-form KL to N(0, I),
cost annealing for the plain-VAE ablation, and the PI controller that
steers the KL weight beta(t) toward a KL setpoint.

Controller error convention: e(t) = setpoint - observed KL, so a KL above
the setpoint drives beta up (more penalty) and a KL below it drives beta
down.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, NumericError
from .numerics import FeedForwardNet, Params, RngStream, check_finite

logger = logging.getLogger(__name__)


@dataclass
class GaussianPosterior:
    """q(z|x) = N(mu, sigma^2 I), batched as (B, D); sigma stored as log sigma."""
    mu: np.ndarray
    log_sigma: np.ndarray

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


class PosteriorHead:
    """Two linear heads h -> mu and h -> log sigma."""

    def __init__(self, in_dim: int, latent_dim: int, rng: Optional[RngStream] = None):
        self.latent_dim = latent_dim
        self.mu_head = FeedForwardNet([in_dim, latent_dim], rng)
        self.log_sigma_head = FeedForwardNet([in_dim, latent_dim], rng)

    def parameters(self, prefix: str = "") -> Params:
        params = self.mu_head.parameters(f"{prefix}mu.")
        params.update(self.log_sigma_head.parameters(f"{prefix}log_sigma."))
        return params

    def backward(
        self, h: np.ndarray, mu_grad: np.ndarray, log_sigma_grad: np.ndarray, prefix: str = ""
    ) -> Tuple[Params, np.ndarray]:
        grads, h_grad = self.mu_head.backward(h, mu_grad, f"{prefix}mu.")
        sigma_grads, h_grad_sigma = self.log_sigma_head.backward(h, log_sigma_grad, f"{prefix}log_sigma.")
        grads.update(sigma_grads)
        return grads, h_grad + h_grad_sigma


def encode_gaussian(head: PosteriorHead, h: np.ndarray) -> GaussianPosterior:
    """Map reference-encoder output h to the posterior parameters."""
    mu = check_finite("posterior.mu", head.mu_head.forward(h))
    log_sigma = check_finite("posterior.log_sigma", head.log_sigma_head.forward(h))
    return GaussianPosterior(mu=mu, log_sigma=log_sigma)


def reparameterize(post: GaussianPosterior, eps: np.ndarray) -> np.ndarray:
    """z = mu + sigma * eps (element-wise)."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != post.mu.shape:
        raise DimensionError(f"Noise shape {eps.shape} != latent shape {post.mu.shape}")
    return post.mu + post.sigma * eps


def kl_to_standard_normal(post: GaussianPosterior) -> float:
    """Sum over latent dims of 1/2 (mu^2 + sigma^2 - 1 - ln sigma^2), averaged over the batch."""
    sigma = post.sigma
    if np.any(sigma <= 0):
        raise NumericError("Posterior sigma must be positive")
    mu = np.atleast_2d(post.mu)
    log_sigma = np.atleast_2d(post.log_sigma)
    per_sample = 0.5 * np.sum(mu ** 2 + np.exp(2.0 * log_sigma) - 1.0 - 2.0 * log_sigma, axis=-1)
    return float(np.mean(per_sample))


def kl_gradients(post: GaussianPosterior) -> Tuple[np.ndarray, np.ndarray]:
    """d KL / d mu and d KL / d log sigma for the batch-averaged KL."""
    batch = np.atleast_2d(post.mu).shape[0]
    return post.mu / batch, (np.exp(2.0 * post.log_sigma) - 1.0) / batch


@dataclass
class AnnealSchedule:
    ramp: int

    def weight(self, step: int) -> float:
        return anneal_weight(step, self)


def anneal_weight(step: int, sched: AnnealSchedule) -> float:
    """Linear KL cost annealing: min(1, step / ramp)."""
    if sched.ramp <= 0:
        return 1.0
    return min(1.0, max(step, 0) / sched.ramp)


@dataclass
class ControllerState:
    kp: float = 0.01
    ki: float = 0.0001
    beta_min: float = 0.0
    beta_max: float = 1.0
    setpoint: float = 3.0
    error_sum: float = 0.0
    beta: float = 0.0
    updates: int = 0
    # running KL average fed to the loop (None until the first observation)
    kl_ema: Optional[float] = None
    smoothing: float = 0.99
    anti_windup: bool = False

    def __post_init__(self):
        self.beta = min(max(self.beta, self.beta_min), self.beta_max)


def smooth_kl(state: ControllerState, kl: float) -> float:
    """Update and return the exponential running average of the batch KL."""
    if not math.isfinite(kl):
        raise NumericError(f"Observed KL is non-finite: {kl}")
    if state.kl_ema is None:
        state.kl_ema = float(kl)
    else:
        state.kl_ema = state.smoothing * state.kl_ema + (1.0 - state.smoothing) * float(kl)
    return state.kl_ema


def pi_beta_update(state: ControllerState, kl_observed: float) -> float:
    """
    beta(t) = Kp / (1 + exp(e(t))) - Ki * sum(e) + beta_min, clamped to
    [beta_min, beta_max], with e(t) = setpoint - kl_observed.
    """
    if not math.isfinite(kl_observed):
        raise NumericError(f"Observed KL is non-finite: {kl_observed}")

    error = state.setpoint - float(kl_observed)
    accumulated = state.error_sum + error
    # overflow-safe logistic Kp / (1 + e^error)
    if error >= 0:
        proportional = state.kp * math.exp(-error) / (1.0 + math.exp(-error))
    else:
        proportional = state.kp / (1.0 + math.exp(error))
    raw = proportional - state.ki * accumulated + state.beta_min
    beta = min(max(raw, state.beta_min), state.beta_max)

    # conditional integration: a saturated output does not commit the new error
    if not (state.anti_windup and beta != raw):
        state.error_sum = accumulated

    state.beta = beta
    state.updates += 1
    return beta
