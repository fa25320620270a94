"""
One-vs-rest linear classification with squared hinge loss, L1 (feature
selection) or L2 (final classifier) regularization, solved by proximal
gradient descent with backtracking
"""

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from constants import config
from errors import DataFormatError, NumericError, UsageError
from file_ops import KeyValueFile, TensorFile
from log import logger

MODEL_VERSION = 1


class Regularization(str, Enum):
    L1 = "l1"
    L2 = "l2"


class SolverConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iter: int = Field(default=config.SOLVER_MAX_ITER, ge=0)
    tol: float = Field(default=config.SOLVER_TOL, gt=0.0)
    armijo: float = Field(default=config.ARMIJO_CONSTANT, gt=0.0, lt=0.5)
    initial_step: float = Field(default=1.0, gt=0.0)
    debug_checks: bool = False
    n_jobs: int = Field(default=1, ge=1)


@dataclass(frozen=True)
class LinearModel:
    """Per-class weights and biases over z-scored features"""

    weights: np.ndarray
    biases: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    regularization: Regularization
    lam: float
    classes: tuple[int, ...]

    def __post_init__(self) -> None:
        k, dim = self.weights.shape
        if self.biases.shape != (k,) or len(self.classes) != k:
            raise UsageError(
                f"{k} weight rows but {self.biases.shape[0]} biases and "
                f"{len(self.classes)} classes"
            )
        if self.mean.shape != (dim,) or self.scale.shape != (dim,):
            raise UsageError("standardization stats do not match weight dim")
        if not np.all(self.scale > 0):
            raise UsageError("standardization scale must be positive")
        if not np.all(np.isfinite(self.weights)):
            raise NumericError("linear model has non-finite weights")
        for array in (self.weights, self.biases, self.mean, self.scale):
            array.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        """Scores for one vector (dim,) or a batch (n, dim)"""
        x = np.asarray(x)
        if x.shape[-1] != self.dim:
            raise UsageError(
                f"feature dim {x.shape[-1]} does not match model dim {self.dim}"
            )
        return self.standardize(x) @ self.weights.T.astype(
            np.float64
        ) + self.biases.astype(np.float64)

    def class_index(self, label: int) -> int:
        try:
            return self.classes.index(int(label))
        except ValueError as e:
            raise UsageError(
                f"Unknown class {label}. Available: {list(self.classes)}"
            ) from e

    def same_as(self, other: "LinearModel") -> bool:
        return (
            self.regularization == other.regularization
            and self.lam == other.lam
            and self.classes == other.classes
            and all(
                np.array_equal(a, b)
                for a, b in zip(
                    (self.weights, self.biases, self.mean, self.scale),
                    (other.weights, other.biases, other.mean, other.scale),
                )
            )
        )

    def save(self, tensor_path: Path, meta_path: Path) -> None:
        TensorFile.write_many(
            tensor_path,
            [
                self.weights,
                self.biases,
                self.mean,
                self.scale,
                np.asarray(self.classes, dtype=np.float32),
            ],
        )
        KeyValueFile.save(
            meta_path,
            {
                "version": MODEL_VERSION,
                "regularization": self.regularization.value,
                "lambda": float(self.lam),
                "dim": self.dim,
                "num_classes": self.num_classes,
            },
        )

    @classmethod
    def load(cls, tensor_path: Path, meta_path: Path) -> "LinearModel":
        meta = KeyValueFile.load(meta_path)
        if meta.get("version") != MODEL_VERSION:
            raise DataFormatError(
                f"{meta_path}: unsupported version {meta.get('version')}"
            )
        arrays = TensorFile.read_many(tensor_path)
        if len(arrays) != 5:
            raise DataFormatError(
                f"{tensor_path}: expected 5 tensors, found {len(arrays)}"
            )
        weights, biases, mean, scale, classes = arrays
        try:
            model = cls(
                weights=weights,
                biases=biases,
                mean=mean,
                scale=scale,
                regularization=Regularization(meta["regularization"]),
                lam=float(meta["lambda"]),
                classes=tuple(int(c) for c in classes),
            )
        except (KeyError, ValueError) as e:
            raise DataFormatError(f"{meta_path}: {e}") from e
        if model.dim != meta.get("dim") or model.num_classes != meta.get(
            "num_classes"
        ):
            raise DataFormatError(
                f"{meta_path}: declared dim/classes do not match {tensor_path}"
            )
        return model


@dataclass(frozen=True)
class SelectedChannels:
    class_id: int
    indices: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.indices)


class SquaredHingeProblem:
    """lam * R(w) + sum_i max(0, 1 - y_i (w . x_i + b))^2 for y in {-1, +1}"""

    def __init__(
        self,
        x: np.ndarray,
        y: np.ndarray,
        regularization: Regularization,
        lam: float,
    ):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.regularization = regularization
        self.lam = float(lam)

    def penalty(self, w: np.ndarray) -> float:
        if self.regularization is Regularization.L1:
            return self.lam * float(np.abs(w).sum())
        return 0.5 * self.lam * float(w @ w)

    def loss(self, w: np.ndarray, b: float) -> tuple[float, np.ndarray]:
        margins = 1.0 - self.y * (self.x @ w + b)
        active = np.maximum(margins, 0.0)
        return float(active @ active), active

    def smooth(self, w: np.ndarray, b: float) -> tuple[float, np.ndarray, float]:
        """Value and gradient of the differentiable part"""
        value, active = self.loss(w, b)
        coef = -2.0 * active * self.y
        grad_w = self.x.T @ coef
        grad_b = float(coef.sum())
        if self.regularization is Regularization.L2:
            value += 0.5 * self.lam * float(w @ w)
            grad_w = grad_w + self.lam * w
        return value, grad_w, grad_b

    def objective(self, w: np.ndarray, b: float) -> float:
        value, _ = self.loss(w, b)
        return value + self.penalty(w)


@dataclass
class SolverResult:
    w: np.ndarray
    b: float
    objectives: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def objective(self) -> float:
        return self.objectives[-1]


def soft_threshold(v: np.ndarray, threshold: float) -> np.ndarray:
    """Proximal operator of threshold * ||.||_1; produces exact zeros"""
    return np.sign(v) * np.maximum(np.abs(v) - threshold, 0.0)


class ProximalGradientSolver:
    """Proximal gradient with halving backtracking and Armijo acceptance"""

    MIN_STEP = 1e-30

    def __init__(self, cfg: Optional[SolverConfig] = None):
        self.cfg = cfg or SolverConfig()

    def _step(
        self,
        problem: SquaredHingeProblem,
        w: np.ndarray,
        b: float,
        grad_w: np.ndarray,
        grad_b: float,
        t: float,
    ) -> tuple[np.ndarray, float]:
        w_new = w - t * grad_w
        if problem.regularization is Regularization.L1:
            w_new = soft_threshold(w_new, t * problem.lam)
        return w_new, b - t * grad_b

    def solve(self, problem: SquaredHingeProblem) -> SolverResult:
        cfg = self.cfg
        w = np.zeros(problem.x.shape[1])
        b = 0.0
        current = problem.objective(w, b)
        result = SolverResult(w=w, b=b, objectives=[current])
        t = cfg.initial_step

        for iteration in range(1, cfg.max_iter + 1):
            _, grad_w, grad_b = problem.smooth(w, b)
            while True:
                w_new, b_new = self._step(problem, w, b, grad_w, grad_b, t)
                candidate = problem.objective(w_new, b_new)
                moved = float(np.sum((w_new - w) ** 2) + (b_new - b) ** 2)
                if candidate <= current - (cfg.armijo / t) * moved:
                    break
                t *= 0.5
                if t < self.MIN_STEP:
                    w_new, b_new, candidate = w, b, current
                    break

            if cfg.debug_checks and candidate > current:
                raise NumericError(
                    f"objective increased at iteration {iteration}: "
                    f"{current} -> {candidate}"
                )

            change = (current - candidate) / max(abs(current), 1e-300)
            w, b, current = w_new, b_new, candidate
            result.objectives.append(current)
            result.iterations = iteration
            if change < cfg.tol:
                result.converged = True
                break
            t *= 2.0

        result.w, result.b = w, b
        if not np.isfinite(current):
            raise NumericError("solver produced a non-finite objective")
        return result


def _standardization(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[~(scale > 0)] = 1.0
    return mean.astype(np.float32), scale.astype(np.float32)


def fit_ovr(
    x: np.ndarray,
    y: Sequence[int],
    regularization: Regularization,
    lam: float,
    cfg: Optional[SolverConfig] = None,
) -> LinearModel:
    """Train one squared-hinge classifier per class against the rest"""
    cfg = cfg or SolverConfig()
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray([int(v) for v in y])
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise UsageError(
            f"features {x.shape} do not match {labels.shape[0]} labels"
        )
    if not np.all(np.isfinite(x)):
        raise UsageError("features must be finite")
    if lam < 0:
        raise UsageError(f"lambda must be nonnegative, got {lam}")
    classes = tuple(int(c) for c in np.unique(labels))
    if len(classes) < 2:
        raise UsageError(
            f"one-vs-rest training needs at least 2 classes, got {classes}"
        )

    mean, scale = _standardization(x)
    x_std = (x - mean.astype(np.float64)) / scale.astype(np.float64)
    solver = ProximalGradientSolver(cfg)

    def solve_class(label: int) -> SolverResult:
        targets = np.where(labels == label, 1.0, -1.0)
        result = solver.solve(
            SquaredHingeProblem(x_std, targets, regularization, lam)
        )
        logger.debug(
            f"class {label}: objective={result.objective:.6g} after "
            f"{result.iterations} iterations (converged={result.converged})"
        )
        return result

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(solve_class, classes))
    else:
        results = [solve_class(label) for label in classes]

    unconverged = [c for c, r in zip(classes, results) if not r.converged]
    if unconverged:
        logger.warning(
            f"solver hit max_iter={cfg.max_iter} for classes {unconverged}"
        )

    model = LinearModel(
        weights=np.stack([r.w for r in results]).astype(np.float32),
        biases=np.asarray([r.b for r in results], dtype=np.float32),
        mean=mean,
        scale=scale,
        regularization=regularization,
        lam=float(lam),
        classes=classes,
    )
    logger.info(
        f"Fitted {regularization.value.upper()} one-vs-rest model: "
        f"{model.num_classes} classes, dim={model.dim}, lambda={lam:g}"
    )
    return model


def predict(model: LinearModel, x: np.ndarray) -> tuple[int, np.ndarray]:
    """Class of the highest score; ties go to the lowest class index"""
    x = np.asarray(x)
    if x.ndim != 1:
        raise UsageError(f"expected a single feature vector, got {x.shape}")
    scores = model.decision_function(x)
    return model.classes[int(np.argmax(scores))], scores


def selected_channels(model: LinearModel, label: int) -> SelectedChannels:
    if model.regularization is not Regularization.L1:
        raise UsageError(
            "channel selection requires an L1 model, got "
            f"{model.regularization.value.upper()}"
        )
    row = model.weights[model.class_index(label)]
    return SelectedChannels(
        class_id=int(label),
        indices=tuple(int(i) for i in np.flatnonzero(row != 0)),
    )


@dataclass(frozen=True)
class SparsityRow:
    class_id: int
    nonzero: int
    percent: float


@dataclass(frozen=True)
class SparsityReport:
    dim: int
    rows: tuple[SparsityRow, ...]

    @property
    def mean_percent(self) -> float:
        return float(np.mean([row.percent for row in self.rows]))

    def format(self) -> str:
        lines = [f"class  nonzero  percent  (of {self.dim} features)"]
        lines.extend(
            f"{row.class_id:>5}  {row.nonzero:>7}  {row.percent:>6.2f}%"
            for row in self.rows
        )
        lines.append(f"mean   {'':>7}  {self.mean_percent:>6.2f}%")
        return "\n".join(lines)


def sparsity_report(model: LinearModel) -> SparsityReport:
    counts = np.count_nonzero(model.weights, axis=1)
    return SparsityReport(
        dim=model.dim,
        rows=tuple(
            SparsityRow(
                class_id=label,
                nonzero=int(count),
                percent=100.0 * int(count) / model.dim,
            )
            for label, count in zip(model.classes, counts)
        ),
    )
