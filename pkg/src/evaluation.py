"""
Test-set evaluation: confusion matrices for the global baseline, the
no-feature-selection ablation and the full part-based classifier
"""

from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from errors import UsageError
from file_ops import CsvFile, ImageFile, KeyValueFile
from log import logger
from parts import PartBox, write_boxes_csv
from pipeline import PartEstimator, PipelineModel, prepare_image
from sparse_linear import predict
from synthgen import SynthRecord, localization_score

RECORDS_HEADER = (
    "image_id",
    "label",
    "initial",
    "baseline",
    "no_fs",
    "fs",
    "num_boxes",
    "iou_no_fs",
    "iou_fs",
)
CONFUSION_CELL = 8


class Variant(str, Enum):
    BASELINE = "baseline"
    NO_FS = "no_fs"
    FS = "fs"


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    label: int
    initial_class: int
    predictions: dict[Variant, int]
    boxes: tuple[PartBox, ...] = ()
    ious: dict[Variant, float] = field(default_factory=dict)

    @property
    def final_class(self) -> Optional[int]:
        return self.predictions.get(Variant.FS)

    def csv_row(self) -> tuple:
        def cell(values: dict, variant: Variant, fmt: str = "{}") -> str:
            return fmt.format(values[variant]) if variant in values else ""

        return (
            self.image_id,
            self.label,
            self.initial_class,
            cell(self.predictions, Variant.BASELINE),
            cell(self.predictions, Variant.NO_FS),
            cell(self.predictions, Variant.FS),
            len(self.boxes),
            cell(self.ious, Variant.NO_FS, "{:.6f}"),
            cell(self.ious, Variant.FS, "{:.6f}"),
        )


def confusion_matrix(
    labels: Iterable[int], predictions: Iterable[int], classes: Sequence[int]
) -> np.ndarray:
    """Counts indexed by (true class, predicted class)"""
    index = {c: i for i, c in enumerate(classes)}
    matrix = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for label, predicted in zip(labels, predictions):
        if label not in index or predicted not in index:
            raise UsageError(
                f"class {label if label not in index else predicted} "
                f"is not among the model classes {list(classes)}"
            )
        matrix[index[label], index[predicted]] += 1
    return matrix


def accuracy(matrix: np.ndarray) -> float:
    total = int(matrix.sum())
    return float(np.trace(matrix)) / total if total else 0.0


def log_scaled(matrix: np.ndarray) -> np.ndarray:
    """log(1 + count), rescaled to [0, 1] for display"""
    scaled = np.log1p(matrix.astype(np.float64))
    peak = scaled.max() if scaled.size else 0.0
    return scaled / peak if peak > 0 else np.zeros_like(scaled)


@dataclass(frozen=True)
class EvalReport:
    classes: tuple[int, ...]
    confusions: dict[Variant, np.ndarray]
    records: tuple[ImageRecord, ...]

    @property
    def variants(self) -> list[Variant]:
        return [v for v in Variant if v in self.confusions]

    @property
    def primary(self) -> Variant:
        return self.variants[-1]

    @property
    def confusion(self) -> np.ndarray:
        return self.confusions[self.primary]

    @property
    def accuracy(self) -> float:
        return accuracy(self.confusion)

    def accuracy_of(self, variant: Variant) -> float:
        if variant not in self.confusions:
            raise UsageError(f"variant {variant.value} was not evaluated")
        return accuracy(self.confusions[variant])

    def mean_iou(self, variant: Variant) -> Optional[float]:
        values = [r.ious[variant] for r in self.records if variant in r.ious]
        return float(np.mean(values)) if values else None

    def summary(self) -> dict[str, object]:
        values: dict[str, object] = {"num_images": len(self.records)}
        for variant in self.variants:
            values[f"accuracy_{variant.value}"] = self.accuracy_of(variant)
            iou = self.mean_iou(variant)
            if iou is not None:
                values[f"mean_iou_{variant.value}"] = iou
        return values

    def format(self) -> str:
        lines = [f"{'variant':<10} {'accuracy':>9} {'mean IoU':>9}"]
        for variant in self.variants:
            iou = self.mean_iou(variant)
            lines.append(
                f"{variant.value:<10} {self.accuracy_of(variant):>9.4f} "
                f"{'' if iou is None else f'{iou:.4f}':>9}"
            )
        return "\n".join(lines)

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        header = ("true\\predicted", *self.classes)
        for variant, matrix in self.confusions.items():
            CsvFile.write(
                directory / f"confusion_{variant.value}.csv",
                header,
                [(c, *row) for c, row in zip(self.classes, matrix.tolist())],
            )
        cells = np.ones((CONFUSION_CELL, CONFUSION_CELL))
        ImageFile.save_grid(
            directory / "confusion.pgm", np.kron(log_scaled(self.confusion), cells)
        )
        CsvFile.write(
            directory / "records.csv",
            RECORDS_HEADER,
            [r.csv_row() for r in self.records],
        )
        write_boxes_csv(
            directory / "boxes.csv", [(r.image_id, r.boxes) for r in self.records]
        )
        KeyValueFile.save(directory / "summary.txt", self.summary())
        logger.info(f"Wrote evaluation report to {directory}")


def evaluate(
    records: Sequence[SynthRecord],
    model: PipelineModel,
    variants: Sequence[Variant] = (Variant.BASELINE, Variant.FS),
) -> EvalReport:
    """Classify every record under each requested variant

    Best-IoU against the glyph box is recorded for part-based variants
    when the record image already has the backbone input size.
    """
    variants = [v for v in Variant if v in set(variants)]
    if not variants:
        raise UsageError("select at least one evaluation variant")
    if Variant.NO_FS in variants and model.final_no_fs is None:
        raise UsageError(
            "model has no no-feature-selection classifier; "
            "retrain with train_ablation = true"
        )

    estimator = PartEstimator(model)
    h, w, _ = model.backbone.image_shape
    results = []
    for record in records:
        img = prepare_image(record.image, model.backbone)
        comparable = (record.image.height, record.image.width) == (h, w)
        g = estimator.global_features(img)
        initial, _ = predict(model.selection, g)
        predictions: dict[Variant, int] = {}
        ious: dict[Variant, float] = {}
        boxes: tuple[PartBox, ...] = ()
        for variant in variants:
            if variant is Variant.BASELINE:
                predictions[variant] = initial
                continue
            use_fs = variant is Variant.FS
            estimate = estimator.estimate(img, use_fs, g)
            features = estimator.part_features(img, estimate.boxes, g)
            final = model.final if use_fs else model.final_no_fs
            assert final is not None
            predictions[variant], _ = predict(final, features)
            boxes = estimate.boxes
            if comparable:
                ious[variant] = localization_score(estimate.boxes, record.glyph_box)
        results.append(
            ImageRecord(
                image_id=record.image_id,
                label=record.label,
                initial_class=initial,
                predictions=predictions,
                boxes=boxes,
                ious=ious,
            )
        )

    classes = model.final.classes
    labels = [r.label for r in results]
    report = EvalReport(
        classes=classes,
        confusions={
            v: confusion_matrix(labels, [r.predictions[v] for r in results], classes)
            for v in variants
        },
        records=tuple(results),
    )
    logger.info(
        f"Evaluated {len(results)} images: "
        + ", ".join(f"{v.value}={report.accuracy_of(v):.4f}" for v in variants)
    )
    return report
