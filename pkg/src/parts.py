"""
Part estimation from a sparse saliency map: non-maximum suppression peaks,
peak-seeded k-means over position, saliency and color, and cluster boxes
"""

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from constants import config
from errors import NumericError, UsageError
from file_ops import CsvFile
from grid import Image
from log import logger
from saliency import SparseSaliency

BOX_CSV_HEADER = ("image_id", "rank", "x0", "y0", "x1", "y1", "recall")


@dataclass(frozen=True)
class Peak:
    x: int
    y: int
    saliency: float
    rank: int


@dataclass(frozen=True)
class PartBox:
    """Axis-aligned box with inclusive pixel bounds"""

    x0: int
    y0: int
    x1: int
    y1: int
    rank: int
    recall: float = 1.0

    @property
    def width(self) -> int:
        return self.x1 - self.x0 + 1

    @property
    def height(self) -> int:
        return self.y1 - self.y0 + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        return (
            (xs >= self.x0) & (xs <= self.x1) & (ys >= self.y0) & (ys <= self.y1)
        )

    def csv_row(self, image_id: str) -> tuple:
        return (
            image_id,
            self.rank,
            self.x0,
            self.y0,
            self.x1,
            self.y1,
            f"{self.recall:.6f}",
        )


@dataclass(frozen=True)
class ClusterAssignment:
    """Retained pixels, their clustering features and cluster ids"""

    xs: np.ndarray
    ys: np.ndarray
    saliency: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray
    peaks: tuple[Peak, ...]
    height: int
    width: int
    cost_history: tuple[float, ...] = field(default=())

    @property
    def num_clusters(self) -> int:
        return int(self.centroids.shape[0])

    def within_cluster_cost(self) -> float:
        """Sum of squared distances of members to their cluster means"""
        cost = 0.0
        for j in range(self.num_clusters):
            members = self.features[self.labels == j]
            if len(members):
                cost += float(((members - members.mean(axis=0)) ** 2).sum())
        return cost


def default_nms_radius(height: int, width: int) -> int:
    return max(config.MIN_NMS_RADIUS, max(height, width) // 8)


def find_peaks(s: SparseSaliency, k: int, radius: int) -> list[Peak]:
    """Greedy non-maximum suppression over the retained pixels"""
    if k < 1:
        raise UsageError(f"k must be at least 1, got {k}")
    if radius < 1:
        raise UsageError(f"NMS radius must be at least 1, got {radius}")
    if len(s) == 0:
        return []

    # Highest saliency first; ties by smaller y, then smaller x
    order = np.lexsort((s.xs, s.ys, -s.values.astype(np.float64)))
    alive = np.ones(len(s), dtype=bool)
    peaks: list[Peak] = []
    for i in order:
        if not alive[i]:
            continue
        x, y = int(s.xs[i]), int(s.ys[i])
        peaks.append(
            Peak(x=x, y=y, saliency=float(s.values[i]), rank=len(peaks) + 1)
        )
        if len(peaks) == k:
            break
        near = np.maximum(np.abs(s.xs - x), np.abs(s.ys - y)) <= radius
        alive &= ~near
    return peaks


def cluster_features(
    s: SparseSaliency, img: Image, weights: Optional[Sequence[float]] = None
) -> np.ndarray:
    """(x/width, y/height, saliency, r, g, b) per retained pixel, weighted"""
    if (img.height, img.width) != (s.height, s.width):
        raise UsageError(
            f"image {img.width}x{img.height} does not match saliency map "
            f"{s.width}x{s.height}"
        )
    rgb = img.rgb().astype(np.float64)[s.ys, s.xs]
    features = np.column_stack(
        [
            s.xs / s.width,
            s.ys / s.height,
            s.values.astype(np.float64),
            rgb,
        ]
    )
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (config.CLUSTER_FEATURES,) or np.any(w < 0):
            raise UsageError(
                f"cluster weights must be {config.CLUSTER_FEATURES} "
                f"nonnegative values, got {list(w)}"
            )
        # Weights scale squared distances per dimension
        features = features * np.sqrt(w)
    return features


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return (diff**2).sum(axis=2)


def cluster_pixels(
    s: SparseSaliency,
    img: Image,
    peaks: Sequence[Peak],
    weights: Optional[Sequence[float]] = None,
    max_iter: int = config.LLOYD_MAX_ITER,
    debug_checks: bool = False,
) -> ClusterAssignment:
    """Lloyd's algorithm seeded at the peaks' feature vectors"""
    if len(s) == 0:
        raise UsageError("no retained pixels to cluster")
    if not peaks:
        raise UsageError("clustering needs at least one peak")

    features = cluster_features(s, img, weights)
    index = {(int(x), int(y)): i for i, (x, y) in enumerate(zip(s.xs, s.ys))}
    seeds = []
    for peak in peaks:
        if (peak.x, peak.y) not in index:
            raise UsageError(
                f"peak ({peak.x},{peak.y}) is not a retained pixel"
            )
        seeds.append(index[(peak.x, peak.y)])

    centroids = features[seeds].copy()
    k = len(seeds)
    labels: Optional[np.ndarray] = None
    history: list[float] = []

    def assign() -> np.ndarray:
        distances = _squared_distances(features, centroids)
        assigned = np.argmin(distances, axis=1)
        cost = float(distances[np.arange(len(features)), assigned].sum())
        if (
            debug_checks
            and history
            and cost > history[-1] + 1e-9 * (1.0 + history[-1])
        ):
            raise NumericError(
                f"k-means cost increased: {history[-1]} -> {cost}"
            )
        history.append(cost)
        return assigned

    for _ in range(max(max_iter, 1)):
        new_labels = assign()
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels

        for j in range(k):
            members = labels == j
            if np.any(members):
                centroids[j] = features[members].mean(axis=0)
            else:
                nearest = _squared_distances(features, centroids).min(axis=1)
                centroids[j] = features[int(np.argmax(nearest))]
                logger.debug(f"reseeded empty cluster {j}")
    else:
        # Out of iterations: labels must reflect the last centroid update
        labels = assign()

    assert labels is not None
    return ClusterAssignment(
        xs=s.xs,
        ys=s.ys,
        saliency=s.values,
        features=features,
        labels=labels,
        centroids=centroids,
        peaks=tuple(peaks),
        height=s.height,
        width=s.width,
        cost_history=tuple(history),
    )


def _min_mass_box(
    xs: np.ndarray, ys: np.ndarray, mass: np.ndarray, q: float
) -> tuple[int, int, int, int]:
    """Smallest box over unique coordinates holding >= q of the total mass

    Ties: smaller area, then smaller x0, smaller y0 and finally smaller y1.
    """
    ux, ix = np.unique(xs, return_inverse=True)
    uy, iy = np.unique(ys, return_inverse=True)
    grid = np.zeros((len(uy) + 1, len(ux) + 1))
    np.add.at(grid, (iy + 1, ix + 1), mass)
    prefix = grid.cumsum(axis=0).cumsum(axis=1)

    total = float(mass.sum())
    need = q * total - 1e-12 * total
    lo = np.arange(len(ux))[:, None]
    hi = np.arange(len(ux))[None, :]
    ordered = lo <= hi
    widths = (ux[None, :] - ux[:, None] + 1).astype(np.int64)
    x_key = widths * 0 + ux[:, None]

    best: Optional[tuple[int, int, int, int, int]] = None
    for c in range(len(uy)):
        for d in range(c, len(uy)):
            band = prefix[d + 1] - prefix[c]
            inside = band[None, 1:] - band[:-1, None]
            feasible = ordered & (inside >= need)
            if not np.any(feasible):
                continue
            height = int(uy[d] - uy[c] + 1)
            area = np.where(feasible, widths * height, np.iinfo(np.int64).max)
            smallest = area.min()
            if best is not None and smallest > best[0]:
                continue
            candidates = np.argwhere(area == smallest)
            a, b = min(candidates, key=lambda ab: x_key[ab[0], ab[1]])
            key = (int(smallest), int(ux[a]), int(uy[c]))
            if best is None or key < best[:3]:
                best = (*key, int(ux[b]), int(uy[d]))
    assert best is not None
    _, x0, y0, x1, y1 = best
    return x0, y0, x1, y1


def _expand(lo: int, hi: int, size: int, min_side: int) -> tuple[int, int]:
    """Grow [lo, hi] around its center to min_side, shifted into [0, size)"""
    target = min(min_side, size)
    length = hi - lo + 1
    if length >= target:
        return lo, hi
    lo -= (target - length) // 2
    hi = lo + target - 1
    if lo < 0:
        hi -= lo
        lo = 0
    if hi > size - 1:
        lo -= hi - (size - 1)
        hi = size - 1
    return lo, hi


def boxes_from_clusters(
    a: ClusterAssignment,
    q: float = 1.0,
    min_side: int = config.MIN_BOX_SIDE,
) -> list[PartBox]:
    """One box per nonempty cluster, ordered by the rank of its seed peak"""
    if not 0.0 < q <= 1.0:
        raise UsageError(f"mass quantile q must lie in (0, 1], got {q}")

    boxes = []
    for j, peak in enumerate(a.peaks):
        members = a.labels == j
        if not np.any(members):
            logger.debug(f"cluster {j} is empty; no box for peak {peak.rank}")
            continue
        xs, ys = a.xs[members], a.ys[members]
        if q == 1.0:
            x0, y0 = int(xs.min()), int(ys.min())
            x1, y1 = int(xs.max()), int(ys.max())
        else:
            mass = a.saliency[members].astype(np.float64)
            if mass.sum() <= 0:
                mass = np.ones_like(mass)
            x0, y0, x1, y1 = _min_mass_box(xs, ys, mass, q)
        x0, x1 = _expand(x0, x1, a.width, min_side)
        y0, y1 = _expand(y0, y1, a.height, min_side)
        box = PartBox(x0=x0, y0=y0, x1=x1, y1=y1, rank=peak.rank)
        recall = float(box.contains(xs, ys).mean())
        boxes.append(
            PartBox(x0=x0, y0=y0, x1=x1, y1=y1, rank=peak.rank, recall=recall)
        )
    return sorted(boxes, key=lambda box: box.rank)


def write_boxes_csv(
    path: Path, records: Iterable[tuple[str, Sequence[PartBox]]]
) -> None:
    rows = [
        box.csv_row(image_id) for image_id, boxes in records for box in boxes
    ]
    CsvFile.write(path, BOX_CSV_HEADER, rows)


def draw_overlay(
    img: Image, saliency: np.ndarray, boxes: Sequence[PartBox]
) -> np.ndarray:
    """Gray image and saliency side by side with box outlines at full value"""
    if saliency.shape != (img.height, img.width):
        raise UsageError(
            f"saliency {saliency.shape} does not match image "
            f"{(img.height, img.width)}"
        )
    gray = img.data.astype(np.float64).mean(axis=2)
    panels = [gray, np.clip(saliency.astype(np.float64), 0.0, 1.0)]
    for panel in panels:
        for box in boxes:
            panel[box.y0, box.x0 : box.x1 + 1] = 1.0
            panel[box.y1, box.x0 : box.x1 + 1] = 1.0
            panel[box.y0 : box.y1 + 1, box.x0] = 1.0
            panel[box.y0 : box.y1 + 1, box.x1] = 1.0
    return np.hstack(panels)
