"""
Dense numeric grids: images, single-channel grids, bilinear resize, cropping
"""

from dataclasses import dataclass

import numpy as np

from errors import UsageError


@dataclass(frozen=True)
class Image:
    """H x W x C float32 image with values in [0, 1], channel-last"""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise UsageError(
                f"image data must have shape (H, W, 1|3), got {data.shape}"
            )
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise UsageError(f"image must be at least 1x1, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise UsageError("image values must be finite")
        if data.min() < 0.0 or data.max() > 1.0:
            raise UsageError("image values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    @property
    def channels(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.height, self.width, self.channels

    def rgb(self) -> np.ndarray:
        """Color values as (H, W, 3); gray images are replicated"""
        if self.channels == 3:
            return self.data
        return np.repeat(self.data, 3, axis=2)

    def crop(self, x0: int, y0: int, x1: int, y1: int) -> "Image":
        """Crop with inclusive pixel bounds"""
        if not (0 <= x0 <= x1 < self.width and 0 <= y0 <= y1 < self.height):
            raise UsageError(
                f"crop ({x0},{y0})-({x1},{y1}) outside "
                f"{self.width}x{self.height} image"
            )
        return Image(self.data[y0 : y1 + 1, x0 : x1 + 1, :])


@dataclass(frozen=True)
class Grid2D:
    """rows x cols float32 grid"""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise UsageError(f"grid must be 2-D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise UsageError("grid values must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])


def _sample_positions(size_in: int, size_out: int) -> np.ndarray:
    """Corner-aligned sample coordinates: first and last pixels coincide"""
    if size_out == 1:
        return np.zeros(1, dtype=np.float64)
    return np.arange(size_out, dtype=np.float64) * (
        (size_in - 1) / (size_out - 1)
    )


def _interpolation_weights(
    size_in: int, size_out: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = _sample_positions(size_in, size_out)
    lo = np.floor(pos).astype(np.int64)
    lo = np.clip(lo, 0, size_in - 1)
    hi = np.minimum(lo + 1, size_in - 1)
    frac = pos - lo
    return lo, hi, frac


def resize_bilinear(img: Image, out_h: int, out_w: int) -> Image:
    """Axis-aligned bilinear resize with corner-aligned sampling"""
    if out_h < 1 or out_w < 1:
        raise UsageError(
            f"output size must be at least 1x1, got {out_h}x{out_w}"
        )
    if (out_h, out_w) == (img.height, img.width):
        return img

    src = img.data.astype(np.float64)
    y_lo, y_hi, fy = _interpolation_weights(img.height, out_h)
    x_lo, x_hi, fx = _interpolation_weights(img.width, out_w)

    # Interpolate rows first, then columns
    rows = (
        src[y_lo, :, :] * (1.0 - fy)[:, None, None]
        + src[y_hi, :, :] * fy[:, None, None]
    )
    out = (
        rows[:, x_lo, :] * (1.0 - fx)[None, :, None]
        + rows[:, x_hi, :] * fx[None, :, None]
    )
    # Convex combinations cannot leave the input range except by rounding
    out = np.clip(out, src.min(), src.max())
    return Image(out.astype(np.float32))
