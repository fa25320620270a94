"""
File operations: text and key=value files, PPM/PGM images, tensor files, CSV
"""

import csv
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from constants import config
from errors import DataFormatError, MissingArtifactError, UsageError
from grid import Image
from log import logger


class FileOperations:
    """Utility class for file operations with consistent error handling"""

    @staticmethod
    def read_file(path: Path, encoding: str = config.DEFAULT_ENCODING) -> str:
        """Read file content with error handling"""
        try:
            with open(path, encoding=encoding) as f:
                return f.read()
        except FileNotFoundError as e:
            logger.error(f"Failed to read file {path}: {e}")
            raise MissingArtifactError(f"missing file: {path}") from e

    @staticmethod
    def write_file(
        path: Path, content: str, encoding: str = config.DEFAULT_ENCODING
    ) -> None:
        """Write file content, creating parent directories"""
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding=encoding, newline="\n") as f:
                f.write(content)
        except Exception as e:
            logger.error(f"Failed to write file {path}: {e}")
            raise

    @staticmethod
    def read_bytes(path: Path) -> bytes:
        try:
            return Path(path).read_bytes()
        except FileNotFoundError as e:
            logger.error(f"Failed to read file {path}: {e}")
            raise MissingArtifactError(f"missing file: {path}") from e

    @staticmethod
    def write_bytes(path: Path, payload: bytes) -> None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(payload)
        except Exception as e:
            logger.error(f"Failed to write file {path}: {e}")
            raise


class KeyValueFile:
    """Plain-text `key = value` files with YAML-typed scalar values"""

    @staticmethod
    def parse(text: str, source: str = "<string>") -> dict[str, Any]:
        values: dict[str, Any] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(
                    f"{source}:{lineno}: expected 'key = value', got {raw!r}"
                )
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise DataFormatError(f"{source}:{lineno}: empty key")
            if key in values:
                raise DataFormatError(
                    f"{source}:{lineno}: duplicate key '{key}'"
                )
            values[key] = KeyValueFile.parse_value(value)
        return values

    @staticmethod
    def parse_value(value: str) -> Any:
        if value == "":
            return ""
        try:
            parsed = yaml.safe_load(value)
        except yaml.YAMLError:
            return value
        if isinstance(parsed, (dict, list)):
            return value
        if isinstance(parsed, str) and any(ch.isdigit() for ch in value):
            # YAML 1.1 reads exponent floats without a dot as strings
            try:
                return float(value)
            except ValueError:
                return parsed
        return parsed

    @staticmethod
    def format_value(value: Any) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if value is None:
            return "null"
        if isinstance(value, float):
            text = repr(value)
            if "e" in text and "." not in text:
                text = text.replace("e", ".0e", 1)
            return text
        return str(value)

    @staticmethod
    def dump(values: Mapping[str, Any]) -> str:
        lines = [
            f"{key} = {KeyValueFile.format_value(values[key])}"
            for key in sorted(values)
        ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def load(path: Path) -> dict[str, Any]:
        return KeyValueFile.parse(FileOperations.read_file(path), str(path))

    @staticmethod
    def save(path: Path, values: Mapping[str, Any]) -> None:
        FileOperations.write_file(path, KeyValueFile.dump(values))


class _HeaderReader:
    """Whitespace/comment aware token reader for netpbm headers"""

    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.path = path
        self.pos = 0

    def token(self, field: str) -> bytes:
        payload = self.payload
        while self.pos < len(payload):
            ch = payload[self.pos : self.pos + 1]
            if ch == b"#":
                end = payload.find(b"\n", self.pos)
                self.pos = len(payload) if end < 0 else end + 1
            elif ch.isspace():
                self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < len(payload) and not (
            payload[self.pos : self.pos + 1].isspace()
        ):
            self.pos += 1
        if start == self.pos:
            raise DataFormatError(f"{self.path}: missing {field} in header")
        return payload[start : self.pos]

    def integer(self, field: str) -> int:
        raw = self.token(field)
        if not raw.isdigit():
            raise DataFormatError(
                f"{self.path}: invalid {field} {raw!r} in header"
            )
        return int(raw)


class ImageFile:
    """Binary PPM (P6) and PGM (P5) images with maxval 255"""

    MAGIC_CHANNELS = {b"P5": 1, b"P6": 3}

    @staticmethod
    def decode(payload: bytes, path: Path) -> Image:
        header = _HeaderReader(payload, path)
        magic = header.token("magic")
        if magic not in ImageFile.MAGIC_CHANNELS:
            raise DataFormatError(
                f"{path}: unsupported magic {magic!r} (expected P5 or P6)"
            )
        channels = ImageFile.MAGIC_CHANNELS[magic]
        width = header.integer("width")
        height = header.integer("height")
        maxval = header.integer("maxval")
        if width < 1 or height < 1:
            raise DataFormatError(
                f"{path}: invalid size {width}x{height} in header"
            )
        if maxval != config.PIXEL_MAXVAL:
            raise DataFormatError(
                f"{path}: unsupported maxval {maxval} "
                f"(only {config.PIXEL_MAXVAL} is supported)"
            )
        # Exactly one whitespace byte separates the header from pixel data
        start = header.pos + 1
        expected = width * height * channels
        pixels = payload[start : start + expected]
        if len(pixels) != expected:
            raise DataFormatError(
                f"{path}: pixel data truncated "
                f"({len(pixels)} of {expected} bytes)"
            )
        values = np.frombuffer(pixels, dtype=np.uint8).astype(np.float32)
        return Image(
            (values / np.float32(config.PIXEL_MAXVAL)).reshape(
                height, width, channels
            )
        )

    @staticmethod
    def load(path: Path) -> Image:
        return ImageFile.decode(FileOperations.read_bytes(path), path)

    @staticmethod
    def quantize(values: np.ndarray) -> np.ndarray:
        scaled = np.rint(np.asarray(values, dtype=np.float64) * 255.0)
        return np.clip(scaled, 0, 255).astype(np.uint8)

    @staticmethod
    def encode(img: Image) -> bytes:
        magic = b"P6" if img.channels == 3 else b"P5"
        header = b"%s\n%d %d\n%d\n" % (
            magic,
            img.width,
            img.height,
            config.PIXEL_MAXVAL,
        )
        return header + ImageFile.quantize(img.data).tobytes()

    @staticmethod
    def save(path: Path, img: Image) -> None:
        FileOperations.write_bytes(path, ImageFile.encode(img))

    @staticmethod
    def save_grid(path: Path, values: np.ndarray) -> None:
        """Write a 2-D array of values in [0, 1] as a PGM"""
        grid = np.clip(np.asarray(values, dtype=np.float32), 0.0, 1.0)
        ImageFile.save(path, Image(grid[:, :, None]))


class TensorFile:
    """`PSF1` tensor records: magic, u64 rank, u64 dims, f32 payload (LE)"""

    MAX_RANK = 64

    @staticmethod
    def encode(dims: Sequence[int], data: np.ndarray) -> bytes:
        dims = [int(d) for d in dims]
        if not dims:
            raise UsageError("tensor dims must be nonempty")
        if any(d < 0 for d in dims):
            raise UsageError(f"tensor dims must be nonnegative, got {dims}")
        flat = np.ascontiguousarray(data, dtype="<f4").reshape(-1)
        if flat.size != int(np.prod(dims, dtype=object)):
            raise UsageError(
                f"tensor data length {flat.size} does not match dims {dims}"
            )
        header = config.TENSOR_MAGIC + np.asarray(
            [len(dims), *dims], dtype="<u8"
        ).tobytes()
        return header + flat.tobytes()

    @staticmethod
    def decode_at(
        payload: bytes, offset: int, path: Path
    ) -> tuple[list[int], np.ndarray, int]:
        """Decode one record starting at offset; return the next offset"""
        magic_len = len(config.TENSOR_MAGIC)
        if payload[offset : offset + magic_len] != config.TENSOR_MAGIC:
            raise DataFormatError(f"{path}: bad magic at byte {offset}")
        offset += magic_len
        if len(payload) < offset + 8:
            raise DataFormatError(f"{path}: truncated rank field")
        rank = int(np.frombuffer(payload, dtype="<u8", count=1, offset=offset)[0])
        offset += 8
        if rank < 1 or rank > TensorFile.MAX_RANK:
            raise DataFormatError(f"{path}: invalid rank {rank}")
        if len(payload) < offset + 8 * rank:
            raise DataFormatError(f"{path}: truncated dims field")
        dims = [
            int(d)
            for d in np.frombuffer(
                payload, dtype="<u8", count=rank, offset=offset
            )
        ]
        offset += 8 * rank
        count = 1
        for d in dims:
            count *= d
        nbytes = count * 4
        if nbytes >= 2**63:
            raise DataFormatError(f"{path}: dims {dims} overflow")
        if len(payload) < offset + nbytes:
            raise DataFormatError(
                f"{path}: truncated payload ({len(payload) - offset} "
                f"of {nbytes} bytes)"
            )
        data = np.frombuffer(
            payload, dtype="<f4", count=count, offset=offset
        ).astype(np.float32)
        return dims, data, offset + nbytes

    @staticmethod
    def write(path: Path, dims: Sequence[int], data: np.ndarray) -> None:
        FileOperations.write_bytes(path, TensorFile.encode(dims, data))

    @staticmethod
    def read(path: Path) -> tuple[list[int], np.ndarray]:
        payload = FileOperations.read_bytes(path)
        dims, data, end = TensorFile.decode_at(payload, 0, path)
        if end != len(payload):
            raise DataFormatError(
                f"{path}: {len(payload) - end} trailing bytes after tensor"
            )
        return dims, data

    @staticmethod
    def read_array(path: Path) -> np.ndarray:
        dims, data = TensorFile.read(path)
        return data.reshape(dims)

    @staticmethod
    def write_many(path: Path, arrays: Iterable[np.ndarray]) -> None:
        """Write a container of consecutive tensor records"""
        chunks = [
            TensorFile.encode(np.shape(a) or (1,), np.asarray(a))
            for a in arrays
        ]
        FileOperations.write_bytes(path, b"".join(chunks))

    @staticmethod
    def read_many(path: Path) -> list[np.ndarray]:
        payload = FileOperations.read_bytes(path)
        arrays = []
        offset = 0
        while offset < len(payload):
            dims, data, offset = TensorFile.decode_at(payload, offset, path)
            arrays.append(data.reshape(dims))
        return arrays


class CsvFile:
    @staticmethod
    def write(
        path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]
    ) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(
            path, "w", encoding=config.DEFAULT_ENCODING, newline=""
        ) as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)

    @staticmethod
    def read(path: Path) -> list[dict[str, str]]:
        try:
            with open(
                path, encoding=config.DEFAULT_ENCODING, newline=""
            ) as f:
                return list(csv.DictReader(f))
        except FileNotFoundError as e:
            logger.error(f"Failed to read file {path}: {e}")
            raise MissingArtifactError(f"missing file: {path}") from e
