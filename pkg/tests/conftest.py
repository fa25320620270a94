import shutil
import tempfile
from collections.abc import Generator
from pathlib import Path

import numpy as np
import pytest

from backbone import BackboneParams, TrainConfig
from grid import Image
from pipeline import PipelineConfig, PipelineModel, train_pipeline
from sparse_linear import SolverConfig
from synthgen import SynthConfig, SynthRecord, generate

TINY_ARCHITECTURE = "conv3x4r,pool2,conv3x8r"


@pytest.fixture
def temp_dir() -> Generator[Path, None, None]:
    """Create a temporary directory for testing"""
    temp_path = Path(tempfile.mkdtemp())
    yield temp_path
    shutil.rmtree(temp_path)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


@pytest.fixture
def random_image(rng: np.random.Generator):
    """Factory for random RGB images with values in [0, 1]"""

    def make(height: int = 16, width: int = 16, channels: int = 3) -> Image:
        return Image(rng.uniform(0.0, 1.0, size=(height, width, channels)))

    return make


@pytest.fixture
def identity_params() -> BackboneParams:
    """1x1 convolution with weight 1 on a single-channel 8x8 input"""
    return BackboneParams.initialize(
        "conv1x1", in_channels=1, input_size=(8, 8)
    ).replace_parameters([np.ones((1, 1, 1, 1))], [np.zeros(1)])


@pytest.fixture
def tiny_params() -> BackboneParams:
    return BackboneParams.initialize(
        TINY_ARCHITECTURE, in_channels=3, input_size=(16, 16), rng_seed=3
    )


@pytest.fixture(scope="session")
def tiny_synth_config() -> SynthConfig:
    return SynthConfig(
        num_classes=3,
        train_per_class=6,
        test_per_class=2,
        image_size=16,
        glyph_size=3,
        clutter_density=0.25,
        seed=0,
    )


@pytest.fixture(scope="session")
def tiny_dataset(
    tiny_synth_config: SynthConfig,
) -> tuple[list[SynthRecord], list[SynthRecord]]:
    return generate(tiny_synth_config)


@pytest.fixture(scope="session")
def tiny_pipeline_config() -> PipelineConfig:
    return PipelineConfig(
        architecture=TINY_ARCHITECTURE,
        input_size=16,
        k=2,
        selection_lambda=0.01,
        final_lambda=1e-2,
        min_box_side=4,
        train=TrainConfig(epochs=2, learning_rate=0.05, batch_size=6),
        solver=SolverConfig(max_iter=300, tol=1e-5),
    )


@pytest.fixture(scope="session")
def tiny_model(
    tiny_dataset: tuple[list[SynthRecord], list[SynthRecord]],
    tiny_pipeline_config: PipelineConfig,
) -> PipelineModel:
    """Pipeline trained once on the tiny glyph dataset for the session"""
    train, _ = tiny_dataset
    return train_pipeline(
        [r.image for r in train], [r.label for r in train], tiny_pipeline_config
    )
