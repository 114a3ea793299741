"""
DDPM machinery shared by the refiner and the bridge.

Linear beta schedules, the closed-form forward process, the epsilon
prediction loss (unconditional, conditional or over latent vectors) and
ancestral sampling. Timesteps are 1-based throughout: t = 1..T.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from constants import (
    BETA_END,
    BETA_START,
    COND_PROJ_DIM,
    MAX_RESCALED_BETA,
    REFERENCE_T,
    TIME_EMBED_DIM,
)

from .errors import ConfigurationError, DimensionError, IndexRangeError
from .numerics import AdamState, FeedForwardNet, Params, RngStream, adam_step, check_finite

logger = logging.getLogger(__name__)

Timesteps = Union[int, np.ndarray]


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Tables indexed by t-1: betas[0] is beta_1."""
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def check_t(self, t: Timesteps) -> np.ndarray:
        t_arr = np.asarray(t)
        if t_arr.size == 0 or np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise IndexRangeError(f"Timestep out of range 1..{self.T}: {t}")
        return t_arr.astype(np.int64)


def make_schedule(T: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    """Linear beta schedule over t=1..T with derived alpha, alpha-bar and sigma tables."""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}", key="T")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    # alpha_bar_0 = 1, hence sigma_1 = 0 exactly
    previous = np.concatenate([[1.0], alpha_bars[:-1]])
    sigmas = np.sqrt((1.0 - previous) / (1.0 - alpha_bars) * betas)
    return DiffusionSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars, sigmas=sigmas)


def default_schedule(T: int) -> DiffusionSchedule:
    """
    Reference schedule (1e-4 -> 0.02 at T=1000) with both endpoints scaled
    by 1000/T for shorter chains, capped at MAX_RESCALED_BETA.
    """
    scale = REFERENCE_T / T if 0 < T < REFERENCE_T else 1.0
    beta_end = min(BETA_END * scale, MAX_RESCALED_BETA)
    beta_start = min(BETA_START * scale, beta_end)
    return make_schedule(T, beta_start, beta_end)


def timestep_embedding(t: Timesteps, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding, shape (N, dim): [sin(t f_k) ..., cos(t f_k) ...]."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t_arr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _per_row(table: np.ndarray, t: np.ndarray, ndim: int):
    """Look up a 1-based table for scalar t or one t per leading row."""
    values = table[t - 1]
    if values.ndim == 0:
        return float(values)
    return values.reshape(values.shape + (1,) * (ndim - 1))


def q_sample(x0: np.ndarray, t: Timesteps, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise DimensionError(f"Noise shape {eps.shape} != sample shape {x0.shape}")
    t_arr = sched.check_t(t)
    alpha_bar = _per_row(sched.alpha_bars, t_arr, x0.ndim)
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def iterate_forward_chain(
    x0: np.ndarray, t: int, sched: DiffusionSchedule, rng: RngStream
) -> np.ndarray:
    """Apply the one-step forward kernel t times with fresh noise."""
    sched.check_t(t)
    x = np.asarray(x0, dtype=np.float64)
    for s in range(1, t + 1):
        x = math.sqrt(sched.alphas[s - 1]) * x + math.sqrt(sched.betas[s - 1]) * rng.normal(x.shape)
    return x


class Denoiser:
    """
    Epsilon predictor: net(x_t ++ time-embedding(t) [++ Linear(c)]) -> eps_hat.

    A conditional denoiser projects its condition c with one linear layer
    before concatenation; whether a condition is used is fixed here.
    """

    def __init__(
        self,
        x_dim: int,
        hidden: int,
        rng: Optional[RngStream] = None,
        cond_dim: Optional[int] = None,
        cond_proj_dim: int = COND_PROJ_DIM,
        n_hidden: int = 2,
    ):
        self.x_dim = int(x_dim)
        self.cond_dim = cond_dim
        self.cond_proj = FeedForwardNet([cond_dim, cond_proj_dim], rng) if cond_dim else None
        in_dim = self.x_dim + TIME_EMBED_DIM + (cond_proj_dim if cond_dim else 0)
        self.net = FeedForwardNet([in_dim] + [hidden] * n_hidden + [self.x_dim], rng)

    @property
    def conditional(self) -> bool:
        return self.cond_proj is not None

    def parameters(self, prefix: str = "") -> Params:
        params = self.net.parameters(f"{prefix}net.")
        if self.cond_proj is not None:
            params.update(self.cond_proj.parameters(f"{prefix}cond."))
        return params

    def _inputs(self, x_t: np.ndarray, t: Timesteps, cond: Optional[np.ndarray]) -> np.ndarray:
        if (cond is not None) != self.conditional:
            state = "conditional" if self.conditional else "unconditional"
            raise ConfigurationError(f"Condition supplied/omitted for a {state} denoiser")
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.ndim != 2 or x_t.shape[1] != self.x_dim:
            raise DimensionError(f"Expected x_t of shape (N, {self.x_dim}), got {x_t.shape}")
        t_rows = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        parts = [x_t, timestep_embedding(t_rows)]
        if cond is not None:
            parts.append(self.cond_proj.forward(cond))
        return np.concatenate(parts, axis=1)

    def predict(self, x_t: np.ndarray, t: Timesteps, cond: Optional[np.ndarray] = None) -> np.ndarray:
        return self.net.forward(self._inputs(x_t, t, cond))

    def backward(
        self,
        x_t: np.ndarray,
        t: Timesteps,
        cond: Optional[np.ndarray],
        output_grad: np.ndarray,
        prefix: str = "",
    ):
        """Parameter gradients and the gradient w.r.t. the raw condition (or None)."""
        inputs = self._inputs(x_t, t, cond)
        grads, input_grad = self.net.backward(inputs, output_grad, f"{prefix}net.")
        cond_grad = None
        if cond is not None:
            offset = self.x_dim + TIME_EMBED_DIM
            proj_grads, cond_grad = self.cond_proj.backward(
                cond, input_grad[:, offset:], f"{prefix}cond."
            )
            grads.update(proj_grads)
        return grads, cond_grad


@dataclass
class DdpmLoss:
    value: float
    param_grads: Params
    cond_grad: Optional[np.ndarray] = None


def ddpm_loss(
    den: Denoiser,
    x0: np.ndarray,
    t: Timesteps,
    eps: np.ndarray,
    sched: DiffusionSchedule,
    cond: Optional[np.ndarray] = None,
    prefix: str = "",
) -> DdpmLoss:
    """Mean over elements of (eps - eps_hat(q_sample(x0, t, eps), t[, c]))^2, with gradients."""
    x_t = q_sample(x0, t, eps, sched)
    eps_hat = den.predict(x_t, t, cond)
    diff = eps_hat - eps
    value = float(np.mean(diff ** 2))
    check_finite("ddpm_loss", value)
    grads, cond_grad = den.backward(x_t, t, cond, 2.0 * diff / diff.size, prefix)
    return DdpmLoss(value=value, param_grads=grads, cond_grad=cond_grad)


def reverse_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    z: Optional[np.ndarray],
    sched: DiffusionSchedule,
) -> np.ndarray:
    """(x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t) + sigma_t z."""
    t_arr = sched.check_t(t)
    if t_arr.ndim != 0:
        raise IndexRangeError("reverse_step takes a single timestep")
    x_t = np.asarray(x_t, dtype=np.float64)
    beta = sched.betas[t - 1]
    mean = (x_t - beta / math.sqrt(1.0 - sched.alpha_bars[t - 1]) * eps_hat) / math.sqrt(sched.alphas[t - 1])
    sigma = sched.sigmas[t - 1]
    if sigma == 0.0:
        return mean
    if z is None or np.shape(z) != x_t.shape:
        raise DimensionError(f"Noise shape {np.shape(z)} != sample shape {x_t.shape}")
    return mean + sigma * z


def sample(
    den: Denoiser,
    shape,
    sched: DiffusionSchedule,
    rng: RngStream,
    cond: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Ancestral sampling: x_T ~ N(0, I), then reverse_step for t = T..1."""
    x = rng.normal(shape)
    for t in range(sched.T, 0, -1):
        eps_hat = den.predict(x, t, cond)
        z = rng.normal(x.shape) if t > 1 else None
        x = reverse_step(x, t, eps_hat, z, sched)
    return check_finite("sample", x)


def fit_denoiser(
    den: Denoiser,
    data: np.ndarray,
    sched: DiffusionSchedule,
    steps: int,
    batch: int,
    lr: float,
    rng: RngStream,
    cond: Optional[np.ndarray] = None,
    log_every: int = 0,
) -> list:
    """Plain DDPM training loop over a fixed sample array; returns the loss history."""
    data = np.asarray(data, dtype=np.float64)
    adam = AdamState(lr=lr)
    params = den.parameters()
    history = []
    for step in range(1, steps + 1):
        rows = rng.integers(0, len(data), batch)
        t = rng.integers(1, sched.T + 1, batch)
        eps = rng.normal((batch, data.shape[1]))
        loss = ddpm_loss(den, data[rows], t, eps, sched, None if cond is None else cond[rows])
        adam_step(adam, params, loss.param_grads)
        history.append(loss.value)
        if log_every and step % log_every == 0:
            logger.info(f"Denoiser step {step}/{steps}: loss={np.mean(history[-log_every:]):.4f}")
    return history
