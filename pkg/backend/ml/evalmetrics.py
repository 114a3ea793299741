"""
Objective metrics and the disentanglement score.

- Frechet distance between Gaussians fit to feature vectors (toy features:
  per-band mean over frames ++ estimated energy/pitch/variation)
- Mel cepstral distortion over frame-aligned mels, 13 coefficients, c0 excluded
- Exclusivity of latent dims: traverse one dim at a time, measure the
  toy factors of the outputs, correlate them with the traversal value
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel
from scipy import linalg
from scipy.fft import dct
from scipy.stats import pearsonr

from constants import EIG_TOLERANCE, FACTOR_NAMES, LOG_FLOOR, MCD_COEFFS, MCD_CONSTANT, N_BANDS
from data.toydata import ToyDataset, estimate_factors

from .errors import DimensionError, EstimationError

logger = logging.getLogger(__name__)

TRAVERSAL_SIGMAS = 2.0
CONSTANT_TOL = 1e-9


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of (n, d) feature vectors; 1-D input means d = 1."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 2:
        raise DimensionError(f"Need at least 2 feature vectors of shape (n, d), got {x.shape}")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return GaussianStats(mean=x.mean(axis=0), cov=0.5 * (cov + cov.T))


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    eigvals, eigvecs = linalg.eigh(cov)
    return (eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))) @ eigvecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the cross term is taken from the eigenvalues of the
    symmetric matrix S_a^(1/2) S_b S_a^(1/2); round-off negatives are
    clamped to zero.
    """
    if a.dim != b.dim:
        raise DimensionError(f"Gaussian dims differ: {a.dim} vs {b.dim}")
    root_a = _psd_sqrt(a.cov)
    middle = root_a @ b.cov @ root_a
    eigvals = linalg.eigvalsh(0.5 * (middle + middle.T))
    scale = max(1.0, float(np.max(np.abs(eigvals))))
    if np.min(eigvals) < -EIG_TOLERANCE * scale:
        logger.warning(f"Clamping eigenvalue {np.min(eigvals):.3e} in Frechet distance")
    cross = float(np.sum(np.sqrt(np.clip(eigvals, 0.0, None))))

    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    distance = mean_term + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * cross
    return max(distance, 0.0)


def cepstra(mel: np.ndarray) -> np.ndarray:
    """Orthonormal type-II DCT over bands of log(mel + floor); negatives clamped to 0 first."""
    return dct(np.log(np.maximum(mel, 0.0) + LOG_FLOOR), type=2, axis=0, norm="ortho")


def mcd(mel_a: np.ndarray, mel_b: np.ndarray) -> float:
    """Frame-averaged mel cepstral distortion over coefficients 1..13 (no time alignment)."""
    mel_a = np.asarray(mel_a, dtype=np.float64)
    mel_b = np.asarray(mel_b, dtype=np.float64)
    if mel_a.shape != mel_b.shape or mel_a.ndim != 2:
        raise DimensionError(f"MCD needs equal (bands, frames) shapes, got {mel_a.shape} and {mel_b.shape}")
    diff = cepstra(mel_a)[1:MCD_COEFFS + 1] - cepstra(mel_b)[1:MCD_COEFFS + 1]
    per_frame = MCD_CONSTANT * np.sqrt(np.sum(diff ** 2, axis=0))
    return float(np.mean(per_frame))


def mean_mcd(mels_a: np.ndarray, mels_b: np.ndarray) -> float:
    if len(mels_a) != len(mels_b):
        raise DimensionError(f"{len(mels_a)} generated vs {len(mels_b)} target mels")
    return float(np.mean([mcd(a, b) for a, b in zip(mels_a, mels_b)]))


def mean_squared_error(mels_a: np.ndarray, mels_b: np.ndarray) -> float:
    mels_a = np.asarray(mels_a, dtype=np.float64)
    mels_b = np.asarray(mels_b, dtype=np.float64)
    if mels_a.shape != mels_b.shape:
        raise DimensionError(f"Shape mismatch {mels_a.shape} vs {mels_b.shape}")
    return float(np.mean((mels_a - mels_b) ** 2))


def toy_features(mels: np.ndarray) -> np.ndarray:
    """(n, F + 3): per-band mean over frames ++ (E, P, V) estimates."""
    mels = np.asarray(mels, dtype=np.float64)
    if mels.ndim != 3 or mels.shape[1] != N_BANDS:
        raise DimensionError(f"Expected mels of shape (n, {N_BANDS}, L), got {mels.shape}")
    features = np.zeros((len(mels), N_BANDS + len(FACTOR_NAMES)))
    features[:, :N_BANDS] = mels.mean(axis=2)
    for i, mel in enumerate(mels):
        try:
            features[i, N_BANDS:] = estimate_factors(mel).as_array()
        except EstimationError:
            logger.warning(f"Sample {i} has no positive entries; factor features set to 0")
    return features


def toy_fd(generated: np.ndarray, target: np.ndarray) -> float:
    return frechet_distance(fit_gaussian(toy_features(generated)), fit_gaussian(toy_features(target)))


def code_histogram(indices: np.ndarray, size: int) -> np.ndarray:
    counts = np.bincount(np.asarray(indices, dtype=np.int64), minlength=size).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    if np.shape(p) != np.shape(q):
        raise DimensionError(f"Histogram shapes differ: {np.shape(p)} vs {np.shape(q)}")
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))


# ==================== Exclusivity ====================

class Traversable(Protocol):
    latent_dim: int
    latent_mean: np.ndarray
    latent_scale: np.ndarray

    def traverse(self, dim: int, values: Sequence[float], contents: np.ndarray) -> List[np.ndarray]:
        ...


class DimensionScore(BaseModel):
    dim: int
    correlations: Dict[str, float]  # |Pearson r| per factor
    exclusivity: float
    dominant_factor: Optional[str] = None
    degenerate: bool = False


class ExclusivityReport(BaseModel):
    dims: List[DimensionScore]
    best_dim: Dict[str, int]

    def score(self, dim: int) -> DimensionScore:
        return self.dims[dim]


def _abs_correlation(values: np.ndarray, series: np.ndarray) -> float:
    """|r|, or 0 when either side is constant (r undefined)."""
    def constant(x):
        return np.ptp(x) <= CONSTANT_TOL * max(1.0, float(np.max(np.abs(x))))

    if constant(values) or constant(series):
        return 0.0
    return float(abs(pearsonr(values, series)[0]))


def score_dimension(dim: int, values: np.ndarray, mels: Sequence[np.ndarray]) -> DimensionScore:
    try:
        measured = np.array([estimate_factors(mel).as_array() for mel in mels])
    except EstimationError as e:
        logger.warning(f"Latent dim {dim}: factor estimation failed ({e}); scored as degenerate")
        return DimensionScore(dim=dim, correlations={f: 0.0 for f in FACTOR_NAMES}, exclusivity=0.0, degenerate=True)

    correlations = {
        name: _abs_correlation(values, measured[:, k]) for k, name in enumerate(FACTOR_NAMES)
    }
    total = sum(correlations.values())
    if total == 0.0:
        logger.warning(f"Latent dim {dim}: all traversal outputs constant; scored as degenerate")
        return DimensionScore(dim=dim, correlations=correlations, exclusivity=0.0, degenerate=True)
    dominant = max(correlations, key=correlations.get)
    return DimensionScore(
        dim=dim,
        correlations=correlations,
        exclusivity=correlations[dominant] / total,
        dominant_factor=dominant,
    )


def exclusivity_score(
    model: Traversable,
    dataset: ToyDataset,
    n_values: int = 9,
    contents: Optional[np.ndarray] = None,
) -> ExclusivityReport:
    """
    Per latent dim: traverse +-2 posterior sigma around the dataset-mean
    latent, estimate (E, P, V) of each output, and score
    exclusivity = max_f |r_f| / sum_f |r_f|.
    """
    if contents is None:
        contents = dataset.contents[dataset.split("test")[0]]
    offsets = np.linspace(-TRAVERSAL_SIGMAS, TRAVERSAL_SIGMAS, n_values)

    scores = []
    for dim in range(model.latent_dim):
        values = model.latent_mean[dim] + offsets * model.latent_scale[dim]
        mels = model.traverse(dim, values, contents)
        scores.append(score_dimension(dim, values, mels))

    best_dim = {
        name: int(max(range(len(scores)), key=lambda d: scores[d].correlations[name]))
        for name in FACTOR_NAMES
    }
    return ExclusivityReport(dims=scores, best_dim=best_dim)


def distinct_factor_dims(
    report: ExclusivityReport, min_abs_r: float = 0.6, min_exclusivity: float = 0.5
) -> Dict[str, int]:
    """Greedy one-dim-per-factor assignment among dims passing both thresholds."""
    candidates = sorted(
        (
            (score.correlations[name], name, score.dim)
            for score in report.dims
            for name in FACTOR_NAMES
            if not score.degenerate
            and score.correlations[name] >= min_abs_r
            and score.exclusivity >= min_exclusivity
        ),
        reverse=True,
    )
    assigned: Dict[str, int] = {}
    used = set()
    for _, name, dim in candidates:
        if name not in assigned and dim not in used:
            assigned[name] = dim
            used.add(dim)
    return assigned
