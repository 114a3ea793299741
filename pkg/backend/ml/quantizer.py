"""
Vector quantization of the style latent.

Nearest-code lookup, the VQ loss, the straight-through gradient rule and
EMA codebook updates. In EMA mode (the default) the codebook never
receives gradients; its entries track the running mean of the latents
assigned to them.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from constants import EMA_EPSILON

from .errors import ConfigurationError, DimensionError
from .numerics import RngStream, to_storage_precision

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Codebook:
    embeddings: np.ndarray  # (K, D)
    cluster_size: np.ndarray  # (K,) EMA counts N_k
    embed_sum: np.ndarray  # (K, D) EMA sums m_k
    decay: float = 0.99
    epsilon: float = EMA_EPSILON

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @classmethod
    def create(
        cls, size: int, dim: int, rng: RngStream, decay: float = 0.99, epsilon: float = EMA_EPSILON
    ) -> "Codebook":
        """Entries ~ N(0, 1/D); accumulators start at N_k = 1, m_k = e_k."""
        if size < 1 or dim < 1:
            raise ConfigurationError(f"Codebook needs size >= 1 and dim >= 1, got {size}x{dim}")
        embeddings = to_storage_precision(rng.normal((size, dim)) / math.sqrt(dim))
        return cls(
            embeddings=embeddings,
            cluster_size=np.ones(size),
            embed_sum=embeddings.copy(),
            decay=decay,
            epsilon=epsilon,
        )

    def parameters(self, prefix: str = "codebook.") -> dict:
        return {f"{prefix}embeddings": self.embeddings}

    def buffers(self, prefix: str = "codebook.") -> dict:
        return {f"{prefix}cluster_size": self.cluster_size, f"{prefix}embed_sum": self.embed_sum}


def nearest_code(z: np.ndarray, book: Codebook) -> Tuple[np.ndarray, np.ndarray]:
    """Per row of z: the closest entry (squared L2) and its index; ties go to the smallest index."""
    if book.size == 0:
        raise ConfigurationError("Codebook is empty")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    if z2.shape[-1] != book.dim:
        raise DimensionError(f"Latent dim {z2.shape[-1]} != codebook dim {book.dim}")
    distances = np.sum((z2[:, None, :] - book.embeddings[None, :, :]) ** 2, axis=-1)
    indices = np.argmin(distances, axis=1)  # first minimum wins
    q = book.embeddings[indices].copy()
    if single:
        return q[0], indices[0]
    return q, indices


def vq_loss(z: np.ndarray, q: np.ndarray, gamma: float, ema: bool = True) -> float:
    """
    gamma * ||z - sg[q]||^2 (+ ||sg[z] - q||^2 when EMA is off), summed over
    latent dims and averaged over the batch. Both terms have the same value;
    sg[.] only changes where gradients flow (see vq_gradients).
    """
    z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    q2 = np.atleast_2d(np.asarray(q, dtype=np.float64))
    if z2.shape != q2.shape:
        raise DimensionError(f"Latent shape {z2.shape} != code shape {q2.shape}")
    squared = float(np.mean(np.sum((z2 - q2) ** 2, axis=-1)))
    return gamma * squared if ema else squared + gamma * squared


def vq_gradients(
    z: np.ndarray, q: np.ndarray, gamma: float, ema: bool = True
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Gradient of vq_loss w.r.t. z (commitment) and w.r.t. q (codebook term, None in EMA mode)."""
    batch = np.atleast_2d(z).shape[0]
    z_grad = 2.0 * gamma * (z - q) / batch
    q_grad = None if ema else 2.0 * (q - z) / batch
    return z_grad, q_grad


def codebook_gradient(book: Codebook, indices: np.ndarray, q_grad: np.ndarray) -> np.ndarray:
    """Scatter per-row code gradients back onto the codebook entries."""
    grad = np.zeros_like(book.embeddings)
    np.add.at(grad, np.atleast_1d(indices), np.atleast_2d(q_grad))
    return grad


def straight_through(z: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Forward value is q; straight_through_grad passes d/dq back to z unchanged."""
    if np.shape(z) != np.shape(q):
        raise DimensionError(f"Latent shape {np.shape(z)} != code shape {np.shape(q)}")
    return np.array(q, dtype=np.float64, copy=True)


def straight_through_grad(output_grad: np.ndarray) -> np.ndarray:
    """Copy rule: gradient at z equals the gradient at the forwarded value."""
    return np.array(output_grad, dtype=np.float64, copy=True)


def ema_update(
    book: Codebook, z: np.ndarray, indices: np.ndarray, storage_precision: bool = False
) -> Codebook:
    """
    N_k <- lam N_k + (1 - lam) count_k ; m_k <- lam m_k + (1 - lam) sum_assigned z
    with Laplace smoothing of N, then e_k <- m_k / N_k. In place.
    """
    z2 = np.atleast_2d(np.asarray(z, dtype=np.float64))
    indices = np.atleast_1d(indices)
    if z2.shape[0] != indices.shape[0]:
        raise DimensionError(f"{z2.shape[0]} latents but {indices.shape[0]} assignments")

    counts = np.bincount(indices, minlength=book.size).astype(np.float64)
    assigned_sum = np.zeros_like(book.embed_sum)
    np.add.at(assigned_sum, indices, z2)

    lam = book.decay
    cluster_size = lam * book.cluster_size + (1.0 - lam) * counts
    total = cluster_size.sum()
    cluster_size = (cluster_size + book.epsilon) / (total + book.size * book.epsilon) * total

    book.cluster_size[...] = cluster_size
    book.embed_sum[...] = lam * book.embed_sum + (1.0 - lam) * assigned_sum
    book.embeddings[...] = book.embed_sum / book.cluster_size[:, None]
    if storage_precision:
        for array in (book.cluster_size, book.embed_sum, book.embeddings):
            to_storage_precision(array)
    return book


def code_perplexity(indices: np.ndarray, size: int) -> float:
    """exp(entropy) of the code-usage histogram: 1 = collapsed, `size` = uniform."""
    counts = np.bincount(np.atleast_1d(indices), minlength=size).astype(np.float64)
    probs = counts / max(counts.sum(), 1.0)
    nonzero = probs[probs > 0]
    return float(np.exp(-np.sum(nonzero * np.log(nonzero))))
