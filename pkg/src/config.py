from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Any, Optional

from pydantic import ValidationError

from backbone import TrainConfig
from constants import config
from errors import UsageError
from file_ops import KeyValueFile
from log import logger
from pipeline import PipelineConfig
from synthgen import SynthConfig

SYNTH_KEYS = {
    "num_classes": "num_classes",
    "train_per_class": "train_per_class",
    "test_per_class": "test_per_class",
    "image_size": "image_size",
    "glyph_size": "glyph_size",
    "clutter_density": "clutter_density",
    "synth_seed": "seed",
}
PATH_DEFAULTS = {
    "dataset_dir": "data",
    "model_dir": "model",
    "output_dir": "out",
}


def _defaults() -> dict[str, Any]:
    synth = SynthConfig()
    values: dict[str, Any] = {
        key: getattr(synth, field) for key, field in SYNTH_KEYS.items()
    }
    values.update(PipelineConfig().flat())
    values.update(PATH_DEFAULTS)
    return values


class ConfigValidator:
    @staticmethod
    def validate_keys(values: Mapping[str, Any], source: str) -> None:
        known = _defaults()
        for key in values:
            if key not in known:
                available = ", ".join(sorted(known))
                raise UsageError(
                    f"Unknown config key '{key}' in {source}. Available: {available}"
                )

    @staticmethod
    def parse_override(assignment: str) -> tuple[str, Any]:
        """`key=value` from the command line"""
        if "=" not in assignment:
            raise UsageError(
                f"override must look like key=value, got '{assignment}'"
            )
        key, value = (part.strip() for part in assignment.split("=", 1))
        return key, KeyValueFile.parse_value(value)


class RunConfig:
    """Flat key=value run configuration shared by every CLI command"""

    def __init__(
        self, values: Optional[Mapping[str, Any]] = None, source: str = "<defaults>"
    ):
        values = dict(values or {})
        ConfigValidator.validate_keys(values, source)
        self.source = source
        self.values = {**_defaults(), **values}
        try:
            self._synth = SynthConfig(
                **{field: self.values[key] for key, field in SYNTH_KEYS.items()}
            )
            self._pipeline = PipelineConfig.from_flat(
                {key: self.values[key] for key in PipelineConfig().flat()}
            )
        except ValidationError as e:
            logger.error(f"Invalid config in {source}: {e}")
            raise UsageError(f"invalid config in {source}: {e}") from e

    @classmethod
    def from_file(cls, path: Path) -> "RunConfig":
        run_config = cls(KeyValueFile.load(path), str(path))
        logger.info(f"Loaded config from {path}")
        return run_config

    def with_overrides(self, assignments: Iterable[str]) -> "RunConfig":
        overrides = dict(
            ConfigValidator.parse_override(a) for a in assignments
        )
        if not overrides:
            return self
        ConfigValidator.validate_keys(overrides, "--set")
        return RunConfig({**self.values, **overrides}, self.source)

    def synth_config(self) -> SynthConfig:
        return self._synth

    def train_config(self) -> TrainConfig:
        return self._pipeline.train

    def pipeline_config(self) -> PipelineConfig:
        return self._pipeline

    def path(self, key: str) -> Path:
        if key not in PATH_DEFAULTS:
            raise UsageError(f"'{key}' is not a path key")
        return Path(str(self.values[key]))

    def resolved(self) -> dict[str, Any]:
        """Every key with its effective value, stage models normalized"""
        values = dict(self.values)
        values.update(
            {key: getattr(self._synth, field) for key, field in SYNTH_KEYS.items()}
        )
        values.update(self._pipeline.flat())
        return values

    def dump(self) -> str:
        return KeyValueFile.dump(self.resolved())

    def save(self, directory: Path) -> Path:
        path = directory / config.RUN_CONFIG_FILENAME
        KeyValueFile.save(path, self.resolved())
        return path
