"""
Deterministic synthetic fine-grained datasets: textured backgrounds, shared
distractor shapes and one small class-specific glyph per image
"""

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import DataFormatError, UsageError
from file_ops import CsvFile, ImageFile
from grid import Image, resize_bilinear
from log import logger
from parts import PartBox

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("path", "split", "label", "x0", "y0", "x1", "y1")
SPLIT_CODES = {"train": 0, "test": 1}

GLYPH_COLORS = (
    (0.90, 0.20, 0.20),
    (0.20, 0.75, 0.25),
    (0.20, 0.35, 0.90),
    (0.95, 0.80, 0.10),
)
MAX_DISTRACTORS = 12


def _grid(size: int) -> tuple[np.ndarray, np.ndarray, float]:
    i, j = np.mgrid[0:size, 0:size]
    return i, j, (size - 1) / 2.0


def _hbars(size: int) -> np.ndarray:
    i, _, _ = _grid(size)
    return i % 3 == 1


def _vbars(size: int) -> np.ndarray:
    _, j, _ = _grid(size)
    return j % 3 == 1


def _cross(size: int) -> np.ndarray:
    i, j, c = _grid(size)
    return (np.abs(i - c) < 1) | (np.abs(j - c) < 1)


def _diagonal_cross(size: int) -> np.ndarray:
    i, j, _ = _grid(size)
    return (i == j) | (i + j == size - 1)


def _ring(size: int) -> np.ndarray:
    i, j, c = _grid(size)
    radius = np.hypot(i - c, j - c)
    return np.abs(radius - (c - 0.5)) <= 0.75


def _dot_grid(size: int) -> np.ndarray:
    i, j, _ = _grid(size)
    return (i % 3 == 1) & (j % 3 == 1)


def _square(size: int) -> np.ndarray:
    i, j, _ = _grid(size)
    return (i == 0) | (j == 0) | (i == size - 1) | (j == size - 1)


def _diamond(size: int) -> np.ndarray:
    i, j, c = _grid(size)
    return np.abs(np.abs(i - c) + np.abs(j - c) - c) <= 0.5


GLYPH_SHAPES: tuple[Callable[[int], np.ndarray], ...] = (
    _hbars,
    _vbars,
    _cross,
    _diagonal_cross,
    _ring,
    _dot_grid,
    _square,
    _diamond,
)
MAX_CLASSES = len(GLYPH_SHAPES) * len(GLYPH_COLORS)


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_classes: int = Field(default=8, ge=2, le=MAX_CLASSES)
    train_per_class: int = Field(default=40, ge=1)
    test_per_class: int = Field(default=20, ge=1)
    image_size: int = Field(default=64, ge=8)
    glyph_size: int = Field(default=9, ge=3)
    clutter_density: float = Field(default=0.5, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode="after")
    def _glyph_fits(self) -> "SynthConfig":
        if self.glyph_size >= self.image_size / 4:
            raise ValueError(
                f"glyph too large for placement: glyph_size={self.glyph_size} "
                f"must be < image_size/4={self.image_size / 4:g}"
            )
        return self


@dataclass(frozen=True)
class GlyphBox:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)


@dataclass(frozen=True)
class SynthRecord:
    image: Image
    label: int
    glyph_box: GlyphBox
    split: str = "train"
    index: int = 0

    @property
    def image_id(self) -> str:
        return f"{self.split}_{self.index:06d}"


def glyph_pattern(label: int, size: int) -> tuple[np.ndarray, tuple[float, ...]]:
    """Boolean glyph mask and its color for a class"""
    if not 0 <= label < MAX_CLASSES:
        raise UsageError(f"label {label} outside [0, {MAX_CLASSES})")
    shape = GLYPH_SHAPES[label % len(GLYPH_SHAPES)]
    # Classes sharing a color differ in shape
    color_index = (label + label // len(GLYPH_SHAPES)) % len(GLYPH_COLORS)
    return shape(size), GLYPH_COLORS[color_index]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(0.35, 0.55, size=3)
    coarse = rng.uniform(-0.1, 0.1, size=(8, 8, 3)) + base
    texture = resize_bilinear(Image(np.clip(coarse, 0.0, 1.0)), size, size)
    grain = rng.normal(0.0, 0.02, size=(size, size, 3))
    return texture.data.astype(np.float64) + grain


def _draw_distractors(
    rng: np.random.Generator, canvas: np.ndarray, density: float
) -> None:
    size = canvas.shape[0]
    count = int(round(density * MAX_DISTRACTORS))
    i, j = np.mgrid[0:size, 0:size]
    for _ in range(count):
        kind = int(rng.integers(0, 3))
        extent = int(rng.integers(3, 9))
        cy, cx = rng.integers(0, size, size=2)
        color = rng.uniform(0.0, 1.0, size=3)
        if kind == 0:
            mask = (np.abs(i - cy) <= extent // 2) & (np.abs(j - cx) <= extent // 2)
        elif kind == 1:
            mask = np.hypot(i - cy, j - cx) <= extent / 2.0
        else:
            horizontal = bool(rng.integers(0, 2))
            along = np.abs((j - cx) if horizontal else (i - cy)) <= extent
            across = (i == cy) if horizontal else (j == cx)
            mask = along & across
        canvas[mask] = color


def _render(
    cfg: SynthConfig, label: int, split: str, index: int
) -> SynthRecord:
    sequence = np.random.SeedSequence(
        [cfg.seed, SPLIT_CODES[split], index]
    )
    background_rng, distractor_rng, glyph_rng = (
        np.random.default_rng(s) for s in sequence.spawn(3)
    )
    size, g = cfg.image_size, cfg.glyph_size

    canvas = _background(background_rng, size)
    _draw_distractors(distractor_rng, canvas, cfg.clutter_density)

    x0, y0 = (int(v) for v in glyph_rng.integers(0, size - g + 1, size=2))
    mask, color = glyph_pattern(label, g)
    patch = canvas[y0 : y0 + g, x0 : x0 + g]
    patch[mask] = color

    # Quantize to 8 bits so written datasets reload bit-exactly
    levels = np.rint(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.float32)
    pixels = levels / np.float32(255.0)
    return SynthRecord(
        image=Image(pixels),
        label=label,
        glyph_box=GlyphBox(x0, y0, x0 + g - 1, y0 + g - 1),
        split=split,
        index=index,
    )


def _split(cfg: SynthConfig, split: str, per_class: int) -> list[SynthRecord]:
    records = []
    for i in range(per_class):
        for label in range(cfg.num_classes):
            records.append(
                _render(cfg, label, split, i * cfg.num_classes + label)
            )
    return records


def generate(cfg: SynthConfig) -> tuple[list[SynthRecord], list[SynthRecord]]:
    train = _split(cfg, "train", cfg.train_per_class)
    test = _split(cfg, "test", cfg.test_per_class)
    logger.info(
        f"Generated {len(train)} train / {len(test)} test images, "
        f"{cfg.num_classes} classes, seed={cfg.seed}"
    )
    return train, test


def box_iou(box: PartBox, gt: GlyphBox) -> float:
    ix = min(box.x1, gt.x1) - max(box.x0, gt.x0) + 1
    iy = min(box.y1, gt.y1) - max(box.y0, gt.y0) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (box.area + gt.area - inter)


def localization_score(boxes: Sequence[PartBox], gt: GlyphBox) -> float:
    """Best intersection-over-union of any box with the glyph box"""
    return max((box_iou(box, gt) for box in boxes), default=0.0)


def write_dataset(
    directory: Path, train: Sequence[SynthRecord], test: Sequence[SynthRecord]
) -> Path:
    rows = []
    for record in [*train, *test]:
        relative = f"{record.split}/{record.index:06d}.ppm"
        ImageFile.save(directory / relative, record.image)
        gt = record.glyph_box
        rows.append(
            (relative, record.split, record.label, gt.x0, gt.y0, gt.x1, gt.y1)
        )
    manifest = directory / MANIFEST_NAME
    CsvFile.write(manifest, MANIFEST_HEADER, rows)
    logger.info(f"Wrote {len(rows)} images and {manifest}")
    return manifest


def load_dataset(
    directory: Path,
) -> tuple[list[SynthRecord], list[SynthRecord]]:
    splits: dict[str, list[SynthRecord]] = {"train": [], "test": []}
    manifest = directory / MANIFEST_NAME
    for lineno, row in enumerate(CsvFile.read(manifest), start=2):
        try:
            split = row["split"]
            if split not in splits:
                raise ValueError(f"unknown split '{split}'")
            record = SynthRecord(
                image=ImageFile.load(directory / row["path"]),
                label=int(row["label"]),
                glyph_box=GlyphBox(
                    int(row["x0"]), int(row["y0"]), int(row["x1"]), int(row["y1"])
                ),
                split=split,
                index=int(Path(row["path"]).stem),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, DataFormatError):
                raise
            raise DataFormatError(f"{manifest}:{lineno}: {e}") from e
        splits[split].append(record)
    return splits["train"], splits["test"]
