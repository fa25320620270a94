"""
Classification-specific part estimation pipeline: backbone training,
L1 feature selection, saliency-guided parts, part features and the final
part-based classifier
"""

import time
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from backbone import BackboneParams, BackboneTrainer, FeatureExtractor, TrainConfig
from constants import config
from errors import (
    CsPartsError,
    DataFormatError,
    MissingArtifactError,
    StageError,
    UsageError,
)
from file_ops import KeyValueFile
from grid import Image, resize_bilinear
from log import logger
from parts import (
    PartBox,
    boxes_from_clusters,
    cluster_pixels,
    default_nms_radius,
    find_peaks,
)
from saliency import (
    SaliencyMap,
    SparseSaliency,
    ThresholdMethod,
    compute_saliency,
    normalize,
    threshold,
)
from sparse_linear import (
    LinearModel,
    Regularization,
    SolverConfig,
    fit_ovr,
    predict,
    selected_channels,
)


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    architecture: str = config.DEFAULT_ARCHITECTURE
    input_size: int = Field(default=config.DEFAULT_INPUT_SIZE, ge=1)
    k: int = Field(default=config.DEFAULT_PART_COUNT, ge=1)
    selection_lambda: float = Field(default=0.1, ge=0.0)
    final_lambda: float = Field(default=1e-3, ge=0.0)
    threshold_method: ThresholdMethod = ThresholdMethod.MEAN
    nms_radius: int = Field(default=0, ge=0)
    q: float = Field(default=1.0, gt=0.0, le=1.0)
    min_box_side: int = Field(default=config.MIN_BOX_SIDE, ge=1)
    cluster_weights: tuple[float, ...] = (1.0,) * config.CLUSTER_FEATURES
    train_ablation: bool = True
    seed: int = 0
    train: TrainConfig = TrainConfig()
    solver: SolverConfig = SolverConfig()

    @field_validator("cluster_weights", mode="before")
    @classmethod
    def _parse_weights(cls, value: Any) -> Any:
        if isinstance(value, str):
            value = [float(v) for v in value.split(",") if v.strip()]
        elif isinstance(value, (int, float)):
            value = [float(value)] * config.CLUSTER_FEATURES
        return value

    @field_validator("cluster_weights")
    @classmethod
    def _check_weights(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if len(value) != config.CLUSTER_FEATURES or min(value) < 0:
            raise ValueError(
                f"cluster_weights needs {config.CLUSTER_FEATURES} "
                "nonnegative values"
            )
        return value

    def radius_for(self, height: int, width: int) -> int:
        """Configured NMS radius, or the resolution-scaled default when 0"""
        return self.nms_radius or default_nms_radius(height, width)

    def flat(self) -> dict[str, Any]:
        """Flat key=value snapshot used for bundles and run configs"""
        return {
            "architecture": self.architecture,
            "input_size": self.input_size,
            "k": self.k,
            "selection_lambda": self.selection_lambda,
            "final_lambda": self.final_lambda,
            "threshold_method": self.threshold_method.value,
            "nms_radius": self.nms_radius,
            "q": self.q,
            "min_box_side": self.min_box_side,
            "cluster_weights": ",".join(repr(w) for w in self.cluster_weights),
            "train_ablation": self.train_ablation,
            "seed": self.seed,
            "epochs": self.train.epochs,
            "learning_rate": self.train.learning_rate,
            "momentum": self.train.momentum,
            "batch_size": self.train.batch_size,
            "train_seed": self.train.seed,
            "solver_max_iter": self.solver.max_iter,
            "solver_tol": self.solver.tol,
            "debug_checks": self.solver.debug_checks,
            "n_jobs": self.solver.n_jobs,
        }

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> "PipelineConfig":
        values = dict(values)
        train = {
            "epochs": values.pop("epochs", None),
            "learning_rate": values.pop("learning_rate", None),
            "momentum": values.pop("momentum", None),
            "batch_size": values.pop("batch_size", None),
            "seed": values.pop("train_seed", None),
        }
        solver = {
            "max_iter": values.pop("solver_max_iter", None),
            "tol": values.pop("solver_tol", None),
            "debug_checks": values.pop("debug_checks", None),
            "n_jobs": values.pop("n_jobs", None),
        }
        return cls(
            **values,
            train=TrainConfig(
                **{k: v for k, v in train.items() if v is not None}
            ),
            solver=SolverConfig(
                **{k: v for k, v in solver.items() if v is not None}
            ),
        )


@dataclass(frozen=True)
class PipelineModel:
    backbone: BackboneParams
    selection: LinearModel
    final: LinearModel
    config: PipelineConfig
    final_no_fs: Optional[LinearModel] = None

    def __post_init__(self) -> None:
        expected = (self.k + 1) * self.backbone.feature_dim
        for model in (self.final, self.final_no_fs):
            if model is not None and model.dim != expected:
                raise UsageError(
                    f"final model dim {model.dim} != (k+1)*D = {expected}"
                )
        if self.selection.dim != self.backbone.feature_dim:
            raise UsageError(
                f"selection model dim {self.selection.dim} != "
                f"D = {self.backbone.feature_dim}"
            )

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    def same_as(self, other: "PipelineModel") -> bool:
        ablation_equal = (self.final_no_fs is None) == (
            other.final_no_fs is None
        ) and (
            self.final_no_fs is None
            or other.final_no_fs is None
            or self.final_no_fs.same_as(other.final_no_fs)
        )
        return (
            self.config == other.config
            and self.backbone.same_as(other.backbone)
            and self.selection.same_as(other.selection)
            and self.final.same_as(other.final)
            and ablation_equal
        )


@dataclass(frozen=True)
class PartEstimate:
    initial_class: int
    boxes: tuple[PartBox, ...]
    channels: tuple[int, ...]
    global_features: np.ndarray
    saliency: Optional[SaliencyMap] = None
    sparse: Optional[SparseSaliency] = None


def prepare_image(img: Image, params: BackboneParams) -> Image:
    """Resize to the backbone input and match its channel count"""
    h, w, c = params.image_shape
    if img.channels != c:
        if img.channels == 1 and c == 3:
            img = Image(img.rgb())
        else:
            img = Image(img.data.mean(axis=2, keepdims=True))
    return resize_bilinear(img, h, w)


class PartEstimator:
    """Runs the per-image stages against a fixed PipelineModel"""

    def __init__(self, model: PipelineModel):
        self.model = model
        self.extractor = FeatureExtractor(model.backbone)

    def global_features(self, img: Image) -> np.ndarray:
        _, features = self.extractor.forward(img)
        return features.data

    def estimate(
        self,
        img: Image,
        use_feature_selection: bool = True,
        global_features: Optional[np.ndarray] = None,
    ) -> PartEstimate:
        model, cfg = self.model, self.model.config
        if global_features is None:
            global_features = self.global_features(img)
        initial, _ = predict(model.selection, global_features)

        if use_feature_selection:
            channels = selected_channels(model.selection, initial).indices
        else:
            channels = tuple(range(model.feature_dim))
        if not channels:
            logger.warning(
                f"class {initial} selects no channels; "
                "falling back to global features only"
            )
            return PartEstimate(initial, (), channels, global_features)

        grads = self.extractor.input_gradients(img, channels)
        saliency = normalize(compute_saliency(grads))
        sparse = threshold(saliency, cfg.threshold_method)
        if len(sparse) == 0:
            logger.warning("no pixels survive saliency thresholding")
            return PartEstimate(
                initial, (), channels, global_features, saliency, sparse
            )

        peaks = find_peaks(sparse, cfg.k, cfg.radius_for(img.height, img.width))
        if len(peaks) < cfg.k:
            logger.debug(f"found {len(peaks)} of {cfg.k} peaks")
        assignment = cluster_pixels(
            sparse,
            img,
            peaks,
            weights=cfg.cluster_weights,
            debug_checks=cfg.solver.debug_checks,
        )
        boxes = boxes_from_clusters(assignment, cfg.q, cfg.min_box_side)
        return PartEstimate(
            initial, tuple(boxes), channels, global_features, saliency, sparse
        )

    def part_features(
        self,
        img: Image,
        boxes: Sequence[PartBox],
        global_features: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """[global | part 1 | ... | part k], zero-padded to (k+1)*D"""
        k, dim = self.model.k, self.model.feature_dim
        if len(boxes) > k:
            raise UsageError(f"{len(boxes)} boxes exceed k={k}")
        if global_features is None:
            global_features = self.global_features(img)

        out = np.zeros((k + 1) * dim, dtype=np.float32)
        out[:dim] = global_features
        h, w, _ = self.model.backbone.image_shape
        for slot, box in enumerate(sorted(boxes, key=lambda b: b.rank), 1):
            if not (0 <= box.x0 <= box.x1 < img.width and 0 <= box.y0 <= box.y1 < img.height):
                raise CsPartsError(f"internal error: box {box} outside image")
            crop = resize_bilinear(img.crop(box.x0, box.y0, box.x1, box.y1), h, w)
            out[slot * dim : (slot + 1) * dim] = self.global_features(crop)
        return out

    def describe(
        self, img: Image, use_feature_selection: bool = True
    ) -> tuple[PartEstimate, np.ndarray]:
        estimate = self.estimate(img, use_feature_selection)
        features = self.part_features(
            img, estimate.boxes, estimate.global_features
        )
        return estimate, features

    def classify(
        self, img: Image, use_feature_selection: bool = True
    ) -> tuple[int, np.ndarray]:
        _, features = self.describe(img, use_feature_selection)
        final = self.model.final if use_feature_selection else self.model.final_no_fs
        if final is None:
            raise UsageError(
                "model has no no-feature-selection classifier; "
                "retrain with train_ablation = true"
            )
        return predict(final, features)


def estimate_parts(img: Image, model: PipelineModel) -> tuple[int, list[PartBox]]:
    estimate = PartEstimator(model).estimate(img)
    return estimate.initial_class, list(estimate.boxes)


def extract_part_features(
    img: Image, boxes: Sequence[PartBox], model: PipelineModel
) -> np.ndarray:
    return PartEstimator(model).part_features(img, boxes)


def classify(img: Image, model: PipelineModel) -> tuple[int, np.ndarray]:
    return PartEstimator(model).classify(img)


@contextmanager
def _stage(name: str, timings: dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    logger.info(f"Stage {name} started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        logger.error(f"Stage {name} failed: {e}")
        raise StageError(name, e) from e
    timings[name] = time.perf_counter() - start
    logger.info(f"Stage {name} finished in {timings[name]:.2f}s")


class PipelineTrainer:
    """Trains every stage in order; records per-stage wall time"""

    def __init__(self, cfg: Optional[PipelineConfig] = None):
        self.cfg = cfg or PipelineConfig()
        self.timings: dict[str, float] = {}
        self.backbone_losses: list[float] = []

    def fit(self, images: Sequence[Image], labels: Sequence[int]) -> PipelineModel:
        cfg = self.cfg
        if len(set(int(y) for y in labels)) < 2:
            raise UsageError("pipeline training needs at least 2 classes")
        if len(images) != len(labels):
            raise UsageError(f"{len(images)} images but {len(labels)} labels")
        self.timings = {}

        with _stage("train_backbone", self.timings):
            initial = BackboneParams.initialize(
                cfg.architecture,
                in_channels=images[0].channels,
                input_size=(cfg.input_size, cfg.input_size),
                rng_seed=cfg.seed,
            )
            prepared = [prepare_image(img, initial) for img in images]
            trainer = BackboneTrainer(cfg.train)
            backbone = trainer.fit(prepared, labels, initial)
            self.backbone_losses = trainer.loss_history

        extractor = FeatureExtractor(backbone)
        with _stage("global_features", self.timings):
            global_features = np.stack(
                [extractor.forward(img)[1].data for img in prepared]
            )

        with _stage("feature_selection", self.timings):
            selection = fit_ovr(
                global_features,
                labels,
                Regularization.L1,
                cfg.selection_lambda,
                cfg.solver,
            )

        dim = backbone.feature_dim
        placeholder = LinearModel(
            weights=np.zeros((selection.num_classes, (cfg.k + 1) * dim), np.float32),
            biases=np.zeros(selection.num_classes, np.float32),
            mean=np.zeros((cfg.k + 1) * dim, np.float32),
            scale=np.ones((cfg.k + 1) * dim, np.float32),
            regularization=Regularization.L2,
            lam=cfg.final_lambda,
            classes=selection.classes,
        )
        partial = PipelineModel(backbone, selection, placeholder, cfg)
        estimator = PartEstimator(partial)

        variants = [True, False] if cfg.train_ablation else [True]
        part_features: dict[bool, list[np.ndarray]] = {v: [] for v in variants}
        with _stage("part_features", self.timings):
            for img, g in zip(prepared, global_features):
                for use_fs in variants:
                    estimate = estimator.estimate(img, use_fs, g)
                    part_features[use_fs].append(
                        estimator.part_features(img, estimate.boxes, g)
                    )

        with _stage("final_classifier", self.timings):
            final = fit_ovr(
                np.stack(part_features[True]),
                labels,
                Regularization.L2,
                cfg.final_lambda,
                cfg.solver,
            )
            final_no_fs = None
            if cfg.train_ablation:
                final_no_fs = fit_ovr(
                    np.stack(part_features[False]),
                    labels,
                    Regularization.L2,
                    cfg.final_lambda,
                    cfg.solver,
                )

        return PipelineModel(backbone, selection, final, cfg, final_no_fs)


def train_pipeline(
    images: Sequence[Image],
    labels: Sequence[int],
    cfg: Optional[PipelineConfig] = None,
) -> PipelineModel:
    return PipelineTrainer(cfg).fit(images, labels)


def save_bundle(model: PipelineModel, directory: Path) -> None:
    files = config.BUNDLE_FILES
    directory.mkdir(parents=True, exist_ok=True)
    model.backbone.save(directory / files["backbone"], directory / files["architecture"])
    model.selection.save(directory / files["selection"], directory / files["selection_meta"])
    model.final.save(directory / files["final"], directory / files["final_meta"])
    if model.final_no_fs is not None:
        model.final_no_fs.save(
            directory / files["final_no_fs"], directory / files["final_no_fs_meta"]
        )
    KeyValueFile.save(directory / config.RUN_CONFIG_FILENAME, model.config.flat())
    logger.info(f"Saved model bundle to {directory}")


def load_bundle(directory: Path) -> PipelineModel:
    files = config.BUNDLE_FILES
    required = [
        files["backbone"],
        files["architecture"],
        files["selection"],
        files["selection_meta"],
        files["final"],
        files["final_meta"],
        config.RUN_CONFIG_FILENAME,
    ]
    for name in required:
        if not (directory / name).is_file():
            raise MissingArtifactError(
                f"model bundle {directory} is missing {name}"
            )
    # The snapshot may be a full run config; only pipeline keys matter here
    snapshot = KeyValueFile.load(directory / config.RUN_CONFIG_FILENAME)
    keys = PipelineConfig().flat()
    try:
        cfg = PipelineConfig.from_flat(
            {k: v for k, v in snapshot.items() if k in keys}
        )
    except ValidationError as e:
        raise DataFormatError(
            f"{directory / config.RUN_CONFIG_FILENAME}: {e}"
        ) from e
    final_no_fs = None
    if (directory / files["final_no_fs"]).is_file():
        final_no_fs = LinearModel.load(
            directory / files["final_no_fs"], directory / files["final_no_fs_meta"]
        )
    return PipelineModel(
        backbone=BackboneParams.load(
            directory / files["backbone"], directory / files["architecture"]
        ),
        selection=LinearModel.load(
            directory / files["selection"], directory / files["selection_meta"]
        ),
        final=LinearModel.load(directory / files["final"], directory / files["final_meta"]),
        config=cfg,
        final_no_fs=final_no_fs,
    )
