"""
Synthetic toy mel-spectrograms with known style factors.

Each sample is a bands x frames matrix with a single Gaussian ridge:

    M[f, l] = E * exp(-(f - mu(l))^2 / (2 w^2)) * env_c(l)
    mu(l)   = P + V * sin(2 pi l / L + phi_c),  phi_c = 2 pi c / 8
    env_c(l) = 0.7 + 0.3 cos(2 pi (1 + c mod 3) l / L)

Energy E, pitch level P and pitch variation V are recoverable exactly
from the ridge (estimate_factors), which turns latent traversals into
measurable experiments. Content c only changes phase and envelope.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from constants import (
    ENERGY_RANGE,
    ENV_BASE,
    ENV_DEPTH,
    ENV_MAX,
    MIN_DATASET_SIZE,
    N_BANDS,
    N_CONTENTS,
    N_FRAMES,
    PITCH_RANGE,
    RIDGE_WIDTH,
    TRAIN_FRACTION,
    TWO_PI,
    VAL_FRACTION,
    VARIATION_RANGE,
)
from ml.errors import ConfigurationError, DimensionError, EstimationError
from ml.numerics import RngStream

logger = logging.getLogger(__name__)

RIDGE_FLOOR = 1e-12


class StyleFactors(BaseModel):
    """Ground-truth generative factors of one toy mel."""
    model_config = ConfigDict(frozen=True)

    energy: float = Field(ge=ENERGY_RANGE[0], le=ENERGY_RANGE[1])
    pitch: float = Field(ge=PITCH_RANGE[0], le=PITCH_RANGE[1])
    variation: float = Field(ge=VARIATION_RANGE[0], le=VARIATION_RANGE[1])
    content: int = Field(ge=0, lt=N_CONTENTS)


class EstimatedFactors(BaseModel):
    energy: float
    pitch: float
    variation: float

    def as_array(self) -> np.ndarray:
        return np.array([self.energy, self.pitch, self.variation])


def content_envelope(content: int, n_frames: int = N_FRAMES) -> np.ndarray:
    frames = np.arange(n_frames)
    harmonic = 1 + content % 3
    return ENV_BASE + ENV_DEPTH * np.cos(TWO_PI * harmonic * frames / n_frames)


def gen_toy_mel(factors: StyleFactors) -> np.ndarray:
    """Deterministic (N_BANDS, N_FRAMES) toy mel for the given factors."""
    bands = np.arange(N_BANDS)[:, None]
    frames = np.arange(N_FRAMES)[None, :]
    phase = TWO_PI * factors.content / N_CONTENTS
    ridge = factors.pitch + factors.variation * np.sin(TWO_PI * frames / N_FRAMES + phase)
    gaussian = np.exp(-((bands - ridge) ** 2) / (2.0 * RIDGE_WIDTH ** 2))
    return factors.energy * gaussian * content_envelope(factors.content)[None, :]


def _refined_ridge(mel: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per frame: sub-band ridge position and peak amplitude from a parabola
    through the log values of the 3 bands around the maximum (exact for a
    Gaussian ridge).
    """
    n_bands, n_frames = mel.shape
    peak = np.argmax(mel, axis=0)
    centre = np.clip(peak, 1, n_bands - 2)
    frames = np.arange(n_frames)
    logs = np.log(np.maximum(mel, RIDGE_FLOOR))
    below = logs[centre - 1, frames]
    middle = logs[centre, frames]
    above = logs[centre + 1, frames]

    curvature = below - 2.0 * middle + above
    concave = curvature < 0
    safe = np.where(concave, curvature, -1.0)
    offset = np.where(concave, 0.5 * (below - above) / safe, 0.0)
    offset = np.clip(offset, -1.0, 1.0)
    log_peak = middle - 0.25 * (below - above) * offset
    return centre + offset, np.exp(log_peak)


def estimate_factors(mel: np.ndarray) -> EstimatedFactors:
    """Recover (E, P, V) from a toy mel via its refined ridge."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.shape != (N_BANDS, N_FRAMES):
        raise DimensionError(f"Expected mel of shape {(N_BANDS, N_FRAMES)}, got {mel.shape}")
    if not np.any(mel > 0):
        raise EstimationError("Spectrogram has no positive entries")

    ridge, amplitude = _refined_ridge(mel)
    return EstimatedFactors(
        # the envelope family peaks at ENV_MAX (frame 0) for every content id
        energy=float(np.max(amplitude) / ENV_MAX),
        pitch=float(np.mean(ridge)),
        variation=float((np.max(ridge) - np.min(ridge)) / 2.0),
    )


@dataclass(eq=False)
class ToyDataset:
    mels: np.ndarray  # (n, F, L)
    factors: np.ndarray  # (n, 4): energy, pitch, variation, content
    contents: np.ndarray  # (n, L) integer content sequences
    seed: int

    def __len__(self) -> int:
        return len(self.mels)

    def split(self, name: str) -> np.ndarray:
        return split_indices(len(self))[name]

    def style_factors(self, index: int) -> StyleFactors:
        energy, pitch, variation, content = self.factors[index]
        return StyleFactors(energy=energy, pitch=pitch, variation=variation, content=int(content))


def split_indices(n: int) -> Dict[str, np.ndarray]:
    """80/10/10 train/val/test split by index."""
    n_train = int(round(n * TRAIN_FRACTION))
    n_val = int(round(n * VAL_FRACTION))
    indices = np.arange(n)
    return {
        "train": indices[:n_train],
        "val": indices[n_train:n_train + n_val],
        "test": indices[n_train + n_val:],
    }


def make_dataset(n: int, seed: int) -> ToyDataset:
    """n samples with factors i.i.d. uniform over their ranges; a pure function of (n, seed)."""
    if n < MIN_DATASET_SIZE:
        raise ConfigurationError(f"Dataset needs at least {MIN_DATASET_SIZE} samples, got {n}", key="dataset_n")

    rng = RngStream(seed)
    energy = rng.uniform(*ENERGY_RANGE, n)
    pitch = rng.uniform(*PITCH_RANGE, n)
    variation = rng.uniform(*VARIATION_RANGE, n)
    content = rng.integers(0, N_CONTENTS, n)

    mels = np.empty((n, N_BANDS, N_FRAMES))
    for i in range(n):
        factors = StyleFactors(
            energy=energy[i], pitch=pitch[i], variation=variation[i], content=int(content[i])
        )
        mels[i] = gen_toy_mel(factors)

    logger.info(f"Generated toy dataset: n={n}, seed={seed}")
    return ToyDataset(
        mels=mels,
        factors=np.stack([energy, pitch, variation, content.astype(np.float64)], axis=1),
        contents=np.repeat(content[:, None], N_FRAMES, axis=1),
        seed=seed,
    )


def dataset_to_tensors(dataset: ToyDataset, prefix: str = "dataset.") -> Dict[str, np.ndarray]:
    return {
        f"{prefix}mels": dataset.mels,
        f"{prefix}factors": dataset.factors,
        f"{prefix}contents": dataset.contents.astype(np.float64),
        # decimal ASCII bytes; float32 cannot hold every seed
        f"{prefix}seed": np.frombuffer(str(dataset.seed).encode("ascii"), dtype=np.uint8).astype(np.float64),
    }


def dataset_from_tensors(tensors: Dict[str, np.ndarray], prefix: str = "dataset.") -> ToyDataset:
    try:
        return ToyDataset(
            mels=np.asarray(tensors[f"{prefix}mels"], dtype=np.float64),
            factors=np.asarray(tensors[f"{prefix}factors"], dtype=np.float64),
            contents=np.asarray(tensors[f"{prefix}contents"]).astype(np.int64),
            seed=int(np.asarray(tensors[f"{prefix}seed"]).astype(np.uint8).tobytes().decode("ascii")),
        )
    except KeyError as e:
        raise ConfigurationError(f"Container has no dataset tensor {e}")


def factor_table(dataset: ToyDataset, indices) -> List[StyleFactors]:
    return [dataset.style_factors(int(i)) for i in indices]
