"""
Dense numerics for the StyleBridge stack.

Small feed-forward networks with hand-derived gradients, the Adam
optimizer, a seeded Gaussian stream and a central finite-difference
checker. Everything computes in float64; tensors that persist across
training steps are kept float32-representable ("storage precision") so a
32-bit checkpoint resumes bitwise.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from constants import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, FD_SCALE_FLOOR, FD_STEP

from .errors import ConfigurationError, DimensionError, NumericError

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


def check_finite(name: str, array) -> np.ndarray:
    """Return `array` as float64, raising NumericError on NaN/Inf."""
    arr = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"Non-finite values in '{name}'", name=name)
    return arr


def to_storage_precision(array: np.ndarray) -> np.ndarray:
    """Round a float64 array in place to float32-representable values."""
    array[...] = array.astype(np.float32)
    return array


class RngStream:
    """Seeded Gaussian/uniform source. Identical seed => identical sequence."""

    def __init__(self, seed: int, key: Tuple[int, ...] = ()):
        if seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {seed}", key="seed")
        self.seed = int(seed)
        self.key = tuple(key)
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    @property
    def generator(self) -> np.random.Generator:
        return self._generator

    def child(self, index: int) -> "RngStream":
        """Independent stream for a concurrent evaluator."""
        return RngStream(self.seed, self.key + (int(index),))

    def normal(self, shape) -> np.ndarray:
        return self._generator.standard_normal(shape)

    def uniform(self, low: float, high: float, size=None):
        return self._generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size)

    def get_state(self) -> bytes:
        return json.dumps(self._generator.bit_generator.state, sort_keys=True).encode("ascii")

    def set_state(self, blob: bytes) -> None:
        self._generator.bit_generator.state = json.loads(blob.decode("ascii"))


def gaussian_sample(rng: RngStream, shape) -> np.ndarray:
    """i.i.d. standard normal array of the given shape."""
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    if any(int(s) < 0 for s in shape):
        raise DimensionError(f"Invalid shape {shape}")
    return rng.normal(shape)


class FeedForwardNet:
    """
    Fully connected net: tanh on hidden layers, identity on the output.

    Weights are stored (fan_in, fan_out) so a batch of row vectors is
    mapped with x @ W + b. Inputs may carry any number of leading batch
    dimensions; the last dimension must equal the first layer width.
    """

    def __init__(
        self,
        widths: Sequence[int],
        rng: Optional[RngStream] = None,
        init_scale: float = 1.0,
    ):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigurationError(f"Invalid layer widths {widths}")

        self.widths = widths
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            if rng is None:
                weight = np.zeros((fan_in, fan_out))
            else:
                weight = rng.normal((fan_in, fan_out)) * (init_scale / math.sqrt(fan_in))
            self.weights.append(to_storage_precision(weight))
            self.biases.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self, prefix: str = "") -> Params:
        """Named views of the parameters (mutating them mutates the net)."""
        params: Params = {}
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}W{i}"] = weight
            params[f"{prefix}b{i}"] = bias
        return params

    def _flatten(self, x) -> Tuple[np.ndarray, Tuple[int, ...]]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.widths[0]:
            raise DimensionError(
                f"Input last dimension {x.shape[-1:] or '()'} != first layer width {self.widths[0]}"
            )
        return x.reshape(-1, self.widths[0]), x.shape[:-1]

    def _forward_cached(self, x2: np.ndarray) -> List[np.ndarray]:
        activations = [x2]
        a = x2
        last = self.n_layers - 1
        for i, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            z = a @ weight + bias
            a = np.tanh(z) if i < last else z
            activations.append(a)
        return activations

    def forward(self, x) -> np.ndarray:
        x2, lead = self._flatten(x)
        out = self._forward_cached(x2)[-1]
        return out.reshape(lead + (self.widths[-1],))

    def backward(self, x, output_grad, prefix: str = "") -> Tuple[Params, np.ndarray]:
        """Gradients of <forward(x), output_grad> w.r.t. every parameter and x."""
        x2, lead = self._flatten(x)
        grad = np.asarray(output_grad, dtype=np.float64)
        if grad.shape != lead + (self.widths[-1],):
            raise DimensionError(
                f"Output gradient shape {grad.shape} != {lead + (self.widths[-1],)}"
            )
        grad = grad.reshape(-1, self.widths[-1])
        activations = self._forward_cached(x2)

        grads: Params = {}
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            if i < last:
                grad = grad * (1.0 - activations[i + 1] ** 2)
            grads[f"{prefix}W{i}"] = activations[i].T @ grad
            grads[f"{prefix}b{i}"] = grad.sum(axis=0)
            grad = grad @ self.weights[i].T
        return grads, grad.reshape(lead + (self.widths[0],))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: Params,
    grads: Params,
    storage_precision: bool = False,
) -> Params:
    """
    One bias-corrected Adam update, in place.

    All gradients are validated before anything is mutated, so a
    NumericError leaves params and state untouched.
    """
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise DimensionError(f"Parameter/gradient names disagree: {missing}")
    for name, grad in grads.items():
        if np.shape(grad) != params[name].shape:
            raise DimensionError(
                f"Gradient for '{name}' has shape {np.shape(grad)}, expected {params[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"Non-finite gradient for parameter '{name}'", name=name)

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, param in params.items():
        grad = grads[name]
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if storage_precision:
            to_storage_precision(param)
            to_storage_precision(m)
            to_storage_precision(v)
    return params


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: Optional[str]
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(
    f: Callable[[Params], Tuple[float, Params]],
    params: Params,
    tol: float = 1e-4,
    h: float = FD_STEP,
    max_entries: Optional[int] = None,
    rng: Optional[RngStream] = None,
    scale_floor: float = FD_SCALE_FLOOR,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences.

    `f(params)` returns (value, grads); it is evaluated once for the
    analytic gradients and twice per checked entry with that entry nudged
    by +-h in place. With `max_entries`, a seeded subset of each tensor
    is checked. Relative error is |a - n| / max(|a|, |n|, scale_floor).
    """
    if tol <= 0:
        raise ConfigurationError(f"tol must be positive, got {tol}")
    rng = rng or RngStream(0)

    value, analytic = f(params)
    if not math.isfinite(value):
        raise NumericError("Objective is non-finite at the base point")

    worst, worst_name, n_checked = 0.0, None, 0
    for name, param in params.items():
        grad = np.asarray(analytic.get(name, np.zeros_like(param)), dtype=np.float64)
        flat_grad = grad.reshape(-1)
        indices = np.arange(param.size)
        if max_entries is not None and param.size > max_entries:
            indices = np.sort(rng.generator.choice(param.size, max_entries, replace=False))

        flat = param.reshape(-1)  # view; params are contiguous
        for i in indices:
            original = flat[i]
            flat[i] = original + h
            plus = f(params)[0]
            flat[i] = original - h
            minus = f(params)[0]
            flat[i] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericError(f"Objective non-finite while perturbing '{name}'", name=name)

            numeric = (plus - minus) / (2.0 * h)
            exact = flat_grad[i]
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), scale_floor)
            n_checked += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}[{i}]"

    report = GradCheckReport(max_rel_error=worst, worst_param=worst_name, n_checked=n_checked, tol=tol)
    logger.debug(f"Gradient check: {n_checked} entries, max rel err {worst:.3e} at {worst_name}")
    return report
