"""
Saliency maps from input gradients of selected feature channels,
min-max normalization and thresholding into sparse saliency maps
"""

from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from backbone import GradientMap
from constants import config
from errors import UsageError
from file_ops import ImageFile, TensorFile
from grid import Grid2D


class ThresholdMethod(str, Enum):
    MEAN = "mean"
    OTSU = "otsu"


@dataclass(frozen=True)
class SaliencyMap(Grid2D):
    """Nonnegative per-pixel saliency at input resolution"""

    normalized: bool = False

    def __post_init__(self) -> None:
        super().__post_init__()
        if np.any(self.data < 0):
            raise UsageError("saliency values must be nonnegative")

    def save_pgm(self, path: Path) -> None:
        """Quantized v = round(255 * m); unnormalized maps are normalized first"""
        values = self.data if self.normalized else normalize(self).data
        ImageFile.save_grid(path, values)

    def save_tensor(self, path: Path) -> None:
        TensorFile.write(path, self.data.shape, self.data)


@dataclass(frozen=True)
class SparseSaliency:
    """Pixels retained by thresholding, in row-major order"""

    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray
    height: int
    width: int
    threshold: float

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def empty(
        cls, height: int, width: int, threshold: float
    ) -> "SparseSaliency":
        return cls(
            xs=np.zeros(0, dtype=np.int64),
            ys=np.zeros(0, dtype=np.int64),
            values=np.zeros(0, dtype=np.float32),
            height=height,
            width=width,
            threshold=threshold,
        )

    @classmethod
    def from_mask(
        cls, m: SaliencyMap, mask: np.ndarray, threshold: float
    ) -> "SparseSaliency":
        ys, xs = np.nonzero(mask)
        return cls(
            xs=xs.astype(np.int64),
            ys=ys.astype(np.int64),
            values=m.data[ys, xs],
            height=m.rows,
            width=m.cols,
            threshold=float(threshold),
        )

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.height, self.width), dtype=np.float32)
        dense[self.ys, self.xs] = self.values
        return dense


def compute_saliency(grads: Sequence[GradientMap]) -> SaliencyMap:
    """Mean over channels of the per-pixel max-abs color gradient"""
    if not grads:
        raise UsageError(
            "saliency needs at least one selected channel; "
            "empty selections take the global-only fallback"
        )
    shape = grads[0].shape
    for g in grads:
        if g.shape != shape:
            raise UsageError(
                f"gradient maps disagree on shape: {shape} vs {g.shape}"
            )
    reduced = np.stack(
        [np.abs(g.data.astype(np.float64)).max(axis=2) for g in grads]
    )
    # Sorting per pixel makes the sum independent of channel order
    total = np.sort(reduced, axis=0).sum(axis=0)
    return SaliencyMap(total / len(grads))


def normalize(m: SaliencyMap) -> SaliencyMap:
    """Min-max scale to [0, 1]; constant maps become all-zero"""
    values = m.data.astype(np.float64)
    low, high = values.min(), values.max()
    if high == low:
        return SaliencyMap(np.zeros_like(m.data), normalized=True)
    return SaliencyMap((values - low) / (high - low), normalized=True)


def otsu_level(values: np.ndarray, levels: int = config.OTSU_LEVELS) -> int:
    """Split level maximizing between-class variance; -1 if none exists

    Values in [0, 1] are binned to floor(levels * v), clipped to the top
    level. The lower class holds levels <= t. Ties go to the smallest t.
    """
    binned = np.minimum(
        np.floor(np.asarray(values, dtype=np.float64) * levels), levels - 1
    ).astype(np.int64)
    hist = np.bincount(binned.ravel(), minlength=levels).astype(np.float64)
    index = np.arange(levels, dtype=np.float64)

    total = hist.sum()
    count_low = np.cumsum(hist)
    sum_low = np.cumsum(hist * index)
    count_high = total - count_low
    sum_high = sum_low[-1] - sum_low

    valid = (count_low > 0) & (count_high > 0)
    if not np.any(valid):
        return -1
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_low = sum_low / count_low
        mean_high = sum_high / count_high
        variance = count_low * count_high * (mean_low - mean_high) ** 2
    variance = np.where(valid, variance, -1.0)
    return int(np.argmax(variance))


def threshold(
    m: SaliencyMap, method: ThresholdMethod = ThresholdMethod.MEAN
) -> SparseSaliency:
    if not m.normalized:
        raise UsageError("threshold expects a normalized saliency map")
    method = ThresholdMethod(method)
    values = m.data
    if values.max() == 0.0:
        return SparseSaliency.empty(m.rows, m.cols, 0.0)

    if method is ThresholdMethod.MEAN:
        cut = float(values.astype(np.float64).mean())
        return SparseSaliency.from_mask(m, values >= cut, cut)

    level = otsu_level(values)
    if level < 0:
        return SparseSaliency.empty(m.rows, m.cols, 1.0)
    levels = config.OTSU_LEVELS
    binned = np.minimum(
        np.floor(values.astype(np.float64) * levels), levels - 1
    )
    return SparseSaliency.from_mask(m, binned > level, (level + 1) / levels)
