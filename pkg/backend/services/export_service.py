"""
Spectrogram image export as plain-text PGM (P2).

Width is frames, height is bands, and row 0 is the highest band so the
picture reads like a spectrogram. Values map linearly from [min, max] to
[0, 255]; a constant matrix maps to 0. The value range goes into a
comment line so read_pgm can invert the map.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from ml.errors import DimensionError, IntegrityError
from ml.numerics import check_finite

logger = logging.getLogger(__name__)

MAXVAL = 255
PIXELS_PER_LINE = 16


@dataclass
class PgmImage:
    pixels: np.ndarray  # (height, width) ints, row 0 at the top
    vmin: float
    vmax: float

    def to_values(self) -> np.ndarray:
        """Invert the linear map; rows back in band order (row 0 = band 0)."""
        values = self.vmin + self.pixels.astype(np.float64) / MAXVAL * (self.vmax - self.vmin)
        return values[::-1]


def to_pixels(matrix: np.ndarray) -> np.ndarray:
    matrix = check_finite("image", matrix)
    if matrix.ndim != 2 or matrix.size == 0:
        raise DimensionError(f"Expected a non-empty 2-D matrix, got shape {matrix.shape}")
    vmin, vmax = float(matrix.min()), float(matrix.max())
    if vmax == vmin:
        return np.zeros(matrix.shape, dtype=np.int64)
    return np.rint((matrix - vmin) / (vmax - vmin) * MAXVAL).astype(np.int64)


def export_pgm(matrix: np.ndarray, path: Union[str, Path]) -> Path:
    matrix = np.asarray(matrix, dtype=np.float64)
    pixels = to_pixels(matrix)[::-1]
    height, width = pixels.shape

    lines = ["P2", f"# range {float(matrix.min())!r} {float(matrix.max())!r}", f"{width} {height}", str(MAXVAL)]
    for row in pixels:
        for start in range(0, width, PIXELS_PER_LINE):
            lines.append(" ".join(str(p) for p in row[start:start + PIXELS_PER_LINE]))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    logger.debug(f"Wrote {width}x{height} PGM to {path}")
    return path


def export_strip(mels: Sequence[np.ndarray], path: Union[str, Path]) -> Path:
    """Several mels side by side under one shared value range."""
    if len(mels) == 0:
        raise DimensionError("Nothing to export")
    return export_pgm(np.concatenate([np.asarray(m) for m in mels], axis=1), path)


def read_pgm(path: Union[str, Path]) -> PgmImage:
    tokens, vmin, vmax = [], 0.0, 0.0
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if line.startswith("# range "):
            _, _, low, high = line.split()
            vmin, vmax = float(low), float(high)
            continue
        tokens.extend(line.split("#", 1)[0].split())

    if not tokens or tokens[0] != "P2":
        raise IntegrityError(f"{path} is not a plain PGM file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    values = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if values.size != width * height or maxval != MAXVAL:
        raise IntegrityError(f"{path}: expected {width * height} pixels at maxval {MAXVAL}")
    return PgmImage(pixels=values.reshape(height, width), vmin=vmin, vmax=vmax)
