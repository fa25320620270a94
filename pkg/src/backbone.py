"""
Convolutional feature extractor: forward pass with global average pooling,
exact input gradients of pooled features, and mini-batch SGD training
"""

import re
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from constants import config
from errors import (
    DataFormatError,
    NumericError,
    TrainingDivergedError,
    UsageError,
)
from file_ops import KeyValueFile, TensorFile
from grid import Image
from log import logger

ARCHITECTURE_VERSION = 1

_CONV_TOKEN = re.compile(r"^conv(?P<k>[13])x(?P<out>[1-9][0-9]*)(?P<relu>r?)$")
_POOL_TOKEN = re.compile(r"^pool2$")


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    out_channels: int
    relu: bool

    @property
    def token(self) -> str:
        suffix = "r" if self.relu else ""
        return f"conv{self.kernel_size}x{self.out_channels}{suffix}"


@dataclass(frozen=True)
class PoolSpec:
    size: int = 2

    @property
    def token(self) -> str:
        return f"pool{self.size}"


LayerSpec = Union[ConvSpec, PoolSpec]


class Architecture:
    """Parses and formats architecture descriptors like `conv3x16r,pool2`"""

    @staticmethod
    def parse(descriptor: str) -> tuple[LayerSpec, ...]:
        tokens = [t.strip() for t in descriptor.split(",") if t.strip()]
        if not tokens:
            raise UsageError("architecture descriptor is empty")

        layers: list[LayerSpec] = []
        for token in tokens:
            conv = _CONV_TOKEN.match(token)
            if conv:
                layers.append(
                    ConvSpec(
                        kernel_size=int(conv["k"]),
                        out_channels=int(conv["out"]),
                        relu=bool(conv["relu"]),
                    )
                )
            elif _POOL_TOKEN.match(token):
                layers.append(PoolSpec())
            else:
                raise UsageError(
                    f"Unknown layer '{token}'. "
                    "Available: conv1x<n>[r], conv3x<n>[r], pool2"
                )

        if not isinstance(layers[-1], ConvSpec):
            raise UsageError("architecture must end with a conv layer")
        return tuple(layers)

    @staticmethod
    def format(layers: Sequence[LayerSpec]) -> str:
        return ",".join(layer.token for layer in layers)


@dataclass(frozen=True)
class BackboneParams:
    """Immutable convolution kernels and biases plus input geometry"""

    layers: tuple[LayerSpec, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    in_channels: int
    input_size: tuple[int, int]
    rng_seed: int = 0

    def __post_init__(self) -> None:
        convs = [layer for layer in self.layers if isinstance(layer, ConvSpec)]
        if len(convs) != len(self.weights) or len(convs) != len(self.biases):
            raise UsageError(
                f"{len(convs)} conv layers but {len(self.weights)} kernels "
                f"and {len(self.biases)} bias vectors"
            )
        fan_in = self.in_channels
        for spec, w, b in zip(convs, self.weights, self.biases):
            expected = (
                spec.out_channels,
                fan_in,
                spec.kernel_size,
                spec.kernel_size,
            )
            if w.shape != expected or b.shape != (spec.out_channels,):
                raise UsageError(
                    f"layer {spec.token}: kernel {w.shape} / bias {b.shape} "
                    f"do not match expected {expected}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericError(f"layer {spec.token}: non-finite weights")
            fan_in = spec.out_channels
        for array in (*self.weights, *self.biases):
            array.setflags(write=False)
        s, u = self.map_size
        if s < 1 or u < 1:
            raise UsageError(
                f"input size {self.input_size} pools down to an empty map"
            )

    @property
    def feature_dim(self) -> int:
        last = [layer for layer in self.layers if isinstance(layer, ConvSpec)]
        return last[-1].out_channels

    @property
    def architecture(self) -> str:
        return Architecture.format(self.layers)

    @property
    def map_size(self) -> tuple[int, int]:
        s, u = self.input_size
        for layer in self.layers:
            if isinstance(layer, PoolSpec):
                s, u = s // layer.size, u // layer.size
        return s, u

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.input_size[0], self.input_size[1], self.in_channels

    def same_as(self, other: "BackboneParams") -> bool:
        """Exact equality of architecture, geometry and every parameter"""
        return (
            self.layers == other.layers
            and self.in_channels == other.in_channels
            and tuple(self.input_size) == tuple(other.input_size)
            and all(
                np.array_equal(a, b)
                for a, b in zip(
                    (*self.weights, *self.biases),
                    (*other.weights, *other.biases),
                )
            )
        )

    @classmethod
    def initialize(
        cls,
        architecture: str = config.DEFAULT_ARCHITECTURE,
        in_channels: int = 3,
        input_size: tuple[int, int] = (
            config.DEFAULT_INPUT_SIZE,
            config.DEFAULT_INPUT_SIZE,
        ),
        rng_seed: int = 0,
    ) -> "BackboneParams":
        """Glorot-uniform kernels, zero biases"""
        layers = Architecture.parse(architecture)
        rng = np.random.default_rng(rng_seed)
        weights, biases = [], []
        fan_in_channels = in_channels
        for layer in layers:
            if not isinstance(layer, ConvSpec):
                continue
            area = layer.kernel_size * layer.kernel_size
            fan_in = fan_in_channels * area
            fan_out = layer.out_channels * area
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            shape = (
                layer.out_channels,
                fan_in_channels,
                layer.kernel_size,
                layer.kernel_size,
            )
            weights.append(
                rng.uniform(-limit, limit, size=shape).astype(np.float32)
            )
            biases.append(np.zeros(layer.out_channels, dtype=np.float32))
            fan_in_channels = layer.out_channels
        return cls(
            layers=layers,
            weights=tuple(weights),
            biases=tuple(biases),
            in_channels=in_channels,
            input_size=(int(input_size[0]), int(input_size[1])),
            rng_seed=rng_seed,
        )

    def replace_parameters(
        self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]
    ) -> "BackboneParams":
        return BackboneParams(
            layers=self.layers,
            weights=tuple(np.asarray(w, dtype=np.float32) for w in weights),
            biases=tuple(np.asarray(b, dtype=np.float32) for b in biases),
            in_channels=self.in_channels,
            input_size=self.input_size,
            rng_seed=self.rng_seed,
        )

    def save(self, tensor_path: Path, descriptor_path: Path) -> None:
        arrays: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            arrays.extend([w, b])
        TensorFile.write_many(tensor_path, arrays)
        KeyValueFile.save(
            descriptor_path,
            {
                "version": ARCHITECTURE_VERSION,
                "architecture": self.architecture,
                "in_channels": self.in_channels,
                "input_height": self.input_size[0],
                "input_width": self.input_size[1],
                "rng_seed": self.rng_seed,
            },
        )

    @classmethod
    def load(cls, tensor_path: Path, descriptor_path: Path) -> "BackboneParams":
        meta = KeyValueFile.load(descriptor_path)
        if meta.get("version") != ARCHITECTURE_VERSION:
            raise DataFormatError(
                f"{descriptor_path}: unsupported version {meta.get('version')}"
            )
        try:
            layers = Architecture.parse(str(meta["architecture"]))
            in_channels = int(meta["in_channels"])
            input_size = (int(meta["input_height"]), int(meta["input_width"]))
            rng_seed = int(meta.get("rng_seed", 0))
        except (KeyError, TypeError, ValueError) as e:
            raise DataFormatError(f"{descriptor_path}: {e}") from e

        arrays = TensorFile.read_many(tensor_path)
        if len(arrays) % 2:
            raise DataFormatError(
                f"{tensor_path}: odd number of parameter tensors"
            )
        try:
            return cls(
                layers=layers,
                weights=tuple(arrays[0::2]),
                biases=tuple(arrays[1::2]),
                in_channels=in_channels,
                input_size=input_size,
                rng_seed=rng_seed,
            )
        except UsageError as e:
            raise DataFormatError(f"{tensor_path}: {e}") from e


@dataclass(frozen=True)
class ChannelStack:
    """D feature maps of size s x u from the last convolutional stage"""

    data: np.ndarray

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise UsageError(
                f"channel stack must have shape (D, s, u), got {self.data.shape}"
            )

    @property
    def channels(self) -> int:
        return int(self.data.shape[0])

    @property
    def rows(self) -> int:
        return int(self.data.shape[1])

    @property
    def cols(self) -> int:
        return int(self.data.shape[2])


@dataclass(frozen=True)
class FeatureVector:
    data: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.data.shape[0])


@dataclass(frozen=True)
class GradientMap:
    """Signed gradient of one pooled feature with respect to every input value"""

    data: np.ndarray
    channel: int = -1

    @property
    def shape(self) -> tuple[int, int, int]:
        h, w, c = self.data.shape
        return int(h), int(w), int(c)


def _mix(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Channel mixing (N, C, H, W) x (O, C) -> (N, O, H, W)"""
    return np.einsum("nchw,oc->nohw", x, matrix, optimize=True)


class _Conv:
    """Same-size convolution as a sum of shifted channel mixes"""

    def __init__(self, spec: ConvSpec, weight: np.ndarray, bias: np.ndarray):
        self.spec = spec
        self.weight = weight.astype(np.float64)
        self.bias = bias.astype(np.float64)
        self.pad = spec.kernel_size // 2

    def _padded(self, x: np.ndarray) -> np.ndarray:
        pad = self.pad
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    def _offsets(self) -> list[tuple[int, int]]:
        k = self.spec.kernel_size
        return [(i, j) for i in range(k) for j in range(k)]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        n, _, h, w = x.shape
        padded = self._padded(x)
        z = np.zeros((n, self.spec.out_channels, h, w))
        for i, j in self._offsets():
            z += _mix(
                padded[:, :, i : i + h, j : j + w], self.weight[:, :, i, j]
            )
        z += self.bias[None, :, None, None]
        cache: dict = {"padded": padded}
        if self.spec.relu:
            mask = z > 0.0
            cache["mask"] = mask
            z = z * mask
        return z, cache

    def backward(
        self, grad: np.ndarray, cache: dict, with_params: bool
    ) -> tuple[np.ndarray, Optional[tuple[np.ndarray, np.ndarray]]]:
        if self.spec.relu:
            grad = grad * cache["mask"]
        n, _, h, w = grad.shape
        k = self.spec.kernel_size
        padded_grad = self._padded(grad)
        grad_in = np.zeros((n, self.weight.shape[1], h, w))
        for i, j in self._offsets():
            # Input gradient is a convolution with the flipped kernel
            kernel = self.weight[:, :, k - 1 - i, k - 1 - j].T
            grad_in += _mix(padded_grad[:, :, i : i + h, j : j + w], kernel)
        if not with_params:
            return grad_in, None

        padded = cache["padded"]
        grad_w = np.zeros_like(self.weight)
        for i, j in self._offsets():
            grad_w[:, :, i, j] = np.einsum(
                "nohw,nchw->oc",
                grad,
                padded[:, :, i : i + h, j : j + w],
                optimize=True,
            )
        grad_b = grad.sum(axis=(0, 2, 3))
        return grad_in, (grad_w, grad_b)


class _Pool:
    def __init__(self, spec: PoolSpec):
        self.size = spec.size

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        n, c, h, w = x.shape
        k = self.size
        oh, ow = h // k, w // k
        blocks = (
            x[:, :, : oh * k, : ow * k]
            .reshape(n, c, oh, k, ow, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, oh, ow, k * k)
        )
        # First maximum in scan order wins ties
        winner = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]
        mask = np.arange(k * k) == winner[..., None]
        return out, {"mask": mask, "shape": (h, w)}

    def backward(
        self, grad: np.ndarray, cache: dict, with_params: bool
    ) -> tuple[np.ndarray, None]:
        k = self.size
        h, w = cache["shape"]
        routed = grad[..., None] * cache["mask"]
        n, c, oh, ow, _ = routed.shape
        grad_in = (
            routed.reshape(n, c, oh, ow, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, oh * k, ow * k)
        )
        if (oh * k, ow * k) != (h, w):
            grad_in = np.pad(
                grad_in, ((0, 0), (0, 0), (0, h - oh * k), (0, w - ow * k))
            )
        return grad_in, None


class FeatureExtractor:
    """Float64 evaluation of a BackboneParams network"""

    def __init__(self, params: BackboneParams):
        self.params = params
        self.layers: list[Union[_Conv, _Pool]] = []
        conv_index = 0
        for layer in params.layers:
            if isinstance(layer, ConvSpec):
                self.layers.append(
                    _Conv(
                        layer,
                        params.weights[conv_index],
                        params.biases[conv_index],
                    )
                )
                conv_index += 1
            else:
                self.layers.append(_Pool(layer))

    def _check_image(self, img: Image) -> None:
        if img.shape != self.params.image_shape:
            raise UsageError(
                f"image shape {img.shape} does not match backbone input "
                f"{self.params.image_shape}; resize first"
            )

    @staticmethod
    def to_batch(images: Sequence[Image]) -> np.ndarray:
        """Stack images as a float64 (N, C, H, W) batch"""
        return np.stack(
            [img.data.transpose(2, 0, 1) for img in images]
        ).astype(np.float64)

    def run(self, batch: np.ndarray) -> tuple[np.ndarray, list[dict]]:
        caches = []
        x = batch
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backpropagate(
        self, grad_maps: np.ndarray, caches: list[dict], with_params: bool
    ) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
        """Push gradients of the final maps back to the input"""
        param_grads: list[tuple[np.ndarray, np.ndarray]] = []
        grad = grad_maps
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad, layer_grads = layer.backward(grad, cache, with_params)
            if layer_grads is not None:
                param_grads.append(layer_grads)
        param_grads.reverse()
        return grad, param_grads

    def pooled_features(self, batch: np.ndarray) -> np.ndarray:
        """Global average pooled features (N, D) for a float64 batch"""
        maps, _ = self.run(batch)
        return maps.mean(axis=(2, 3))

    def forward(self, img: Image) -> tuple[ChannelStack, FeatureVector]:
        self._check_image(img)
        maps, _ = self.run(self.to_batch([img]))
        stack = maps[0]
        features = stack.mean(axis=(1, 2))
        return (
            ChannelStack(stack.astype(np.float32)),
            FeatureVector(features.astype(np.float32)),
        )

    def features(self, images: Sequence[Image], batch_size: int = 32) -> np.ndarray:
        """Float32 global features (N, D) for many images"""
        if not images:
            return np.zeros((0, self.params.feature_dim), dtype=np.float32)
        for img in images:
            self._check_image(img)
        chunks = [
            self.pooled_features(self.to_batch(images[i : i + batch_size]))
            for i in range(0, len(images), batch_size)
        ]
        return np.concatenate(chunks).astype(np.float32)

    def input_gradients(
        self, img: Image, channels: Sequence[int]
    ) -> list[GradientMap]:
        """Gradients of f^(d) for every d in channels, one backward pass"""
        self._check_image(img)
        dim = self.params.feature_dim
        for d in channels:
            if not 0 <= d < dim:
                raise UsageError(f"channel {d} out of range [0, {dim})")
        if not channels:
            return []

        maps, caches = self.run(self.to_batch([img]))
        _, _, s, u = maps.shape
        seeds = np.zeros((len(channels), dim, s, u))
        for row, d in enumerate(channels):
            seeds[row, d] = 1.0 / (s * u)
        grads, _ = self.backpropagate(seeds, caches, with_params=False)
        return [
            GradientMap(g.transpose(1, 2, 0).astype(np.float32), channel=int(d))
            for g, d in zip(grads, channels)
        ]


def forward(img: Image, params: BackboneParams) -> tuple[ChannelStack, FeatureVector]:
    return FeatureExtractor(params).forward(img)


def input_gradients(
    img: Image, params: BackboneParams, channels: Sequence[int]
) -> list[GradientMap]:
    return FeatureExtractor(params).input_gradients(img, channels)


def input_gradient(img: Image, params: BackboneParams, d: int) -> GradientMap:
    return FeatureExtractor(params).input_gradients(img, [d])[0]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    epochs: int = Field(default=10, ge=0)
    learning_rate: float = Field(default=0.01, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    batch_size: int = Field(default=16, ge=1)
    seed: int = 0


def _softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient with respect to the logits"""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    log_likelihood = shifted[np.arange(n), targets] - np.log(exp.sum(axis=1))
    grad = probs.copy()
    grad[np.arange(n), targets] -= 1.0
    return float(-log_likelihood.mean()), grad / n


class BackboneTrainer:
    """Softmax cross-entropy training through a temporary linear head"""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.loss_history: list[float] = []

    def _dataset_loss(
        self,
        extractor: FeatureExtractor,
        batch: np.ndarray,
        targets: np.ndarray,
        head_w: np.ndarray,
        head_b: np.ndarray,
    ) -> float:
        total = 0.0
        step = max(self.cfg.batch_size, 32)
        for i in range(0, len(batch), step):
            feats = extractor.pooled_features(batch[i : i + step])
            loss, _ = _softmax_cross_entropy(
                feats @ head_w + head_b, targets[i : i + step]
            )
            total += loss * len(feats)
        return total / len(batch)

    def fit(
        self,
        images: Sequence[Image],
        labels: Sequence[int],
        initial: BackboneParams,
    ) -> BackboneParams:
        classes = sorted(set(int(label) for label in labels))
        if len(classes) < 2:
            raise UsageError(
                f"backbone training needs at least 2 classes, got {classes}"
            )
        if len(images) != len(labels):
            raise UsageError(
                f"{len(images)} images but {len(labels)} labels"
            )
        for img in images:
            if img.shape != initial.image_shape:
                raise UsageError(
                    f"training image shape {img.shape} does not match "
                    f"backbone input {initial.image_shape}"
                )

        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        class_index = {c: i for i, c in enumerate(classes)}
        targets = np.asarray([class_index[int(y)] for y in labels])
        batch = FeatureExtractor.to_batch(images)

        dim = initial.feature_dim
        limit = np.sqrt(6.0 / (dim + len(classes)))
        head_w = rng.uniform(-limit, limit, size=(dim, len(classes)))
        head_b = np.zeros(len(classes))

        weights = [w.astype(np.float64) for w in initial.weights]
        biases = [b.astype(np.float64) for b in initial.biases]
        velocity_w = [np.zeros_like(w) for w in weights]
        velocity_b = [np.zeros_like(b) for b in biases]
        velocity_hw = np.zeros_like(head_w)
        velocity_hb = np.zeros_like(head_b)

        extractor = FeatureExtractor(initial)
        self.loss_history = [
            self._dataset_loss(extractor, batch, targets, head_w, head_b)
        ]
        logger.info(
            f"Training backbone {initial.architecture} on {len(images)} "
            f"images, {len(classes)} classes: "
            f"epoch 0 loss={self.loss_history[0]:.4f}"
        )

        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(images))
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                maps, caches = extractor.run(batch[idx])
                _, _, s, u = maps.shape
                feats = maps.mean(axis=(2, 3))
                loss, grad_logits = _softmax_cross_entropy(
                    feats @ head_w + head_b, targets[idx]
                )
                if not np.isfinite(loss):
                    raise TrainingDivergedError(epoch, loss)

                grad_hw = feats.T @ grad_logits
                grad_hb = grad_logits.sum(axis=0)
                grad_feats = grad_logits @ head_w.T
                grad_maps = np.broadcast_to(
                    grad_feats[:, :, None, None] / (s * u), maps.shape
                )
                _, param_grads = extractor.backpropagate(
                    grad_maps, caches, with_params=True
                )

                for i, (gw, gb) in enumerate(param_grads):
                    velocity_w[i] = cfg.momentum * velocity_w[i] - cfg.learning_rate * gw
                    velocity_b[i] = cfg.momentum * velocity_b[i] - cfg.learning_rate * gb
                    weights[i] = weights[i] + velocity_w[i]
                    biases[i] = biases[i] + velocity_b[i]
                velocity_hw = cfg.momentum * velocity_hw - cfg.learning_rate * grad_hw
                velocity_hb = cfg.momentum * velocity_hb - cfg.learning_rate * grad_hb
                head_w = head_w + velocity_hw
                head_b = head_b + velocity_hb

                if not all(np.all(np.isfinite(w)) for w in weights):
                    raise TrainingDivergedError(epoch, float("nan"))
                extractor = FeatureExtractor(
                    initial.replace_parameters(weights, biases)
                )

            epoch_loss = self._dataset_loss(
                extractor, batch, targets, head_w, head_b
            )
            if not np.isfinite(epoch_loss):
                raise TrainingDivergedError(epoch, epoch_loss)
            self.loss_history.append(epoch_loss)
            logger.info(f"Epoch {epoch}/{cfg.epochs}: loss={epoch_loss:.4f}")

        return extractor.params


def train_backbone(
    images: Sequence[Image],
    labels: Sequence[int],
    initial: BackboneParams,
    cfg: Optional[TrainConfig] = None,
) -> BackboneParams:
    return BackboneTrainer(cfg or TrainConfig()).fit(images, labels, initial)


def load_precomputed(
    stack_path: Path,
    grads_path: Path,
    feature_dim: int,
    image_shape: tuple[int, int, int],
) -> tuple[ChannelStack, list[GradientMap]]:
    """Read externally computed feature maps and per-channel input gradients"""
    stack = TensorFile.read_array(stack_path)
    grads = TensorFile.read_array(grads_path)
    if stack.ndim != 3 or stack.shape[0] != feature_dim:
        raise DataFormatError(
            f"{stack_path}: expected dims [{feature_dim}, s, u], "
            f"got {list(stack.shape)}"
        )
    expected = (feature_dim, *image_shape)
    if grads.shape != expected:
        raise DataFormatError(
            f"{grads_path}: expected dims {list(expected)}, "
            f"got {list(grads.shape)}"
        )
    return ChannelStack(stack), [
        GradientMap(g, channel=d) for d, g in enumerate(grads)
    ]
