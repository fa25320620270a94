import dataclasses
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

import pipeline
from constants import config
from errors import (
    CsPartsError,
    DataFormatError,
    MissingArtifactError,
    NumericError,
    StageError,
    UsageError,
)
from file_ops import KeyValueFile
from grid import Image
from parts import PartBox
from pipeline import (
    PartEstimator,
    PipelineConfig,
    PipelineModel,
    PipelineTrainer,
    classify,
    estimate_parts,
    extract_part_features,
    load_bundle,
    prepare_image,
    save_bundle,
)
from sparse_linear import predict, selected_channels


def _test_images(tiny_dataset) -> list[Image]:
    _, test = tiny_dataset
    return [r.image for r in test]


class TestPipelineConfig:
    """Tests for PipelineConfig focusing on parsing and snapshots"""

    def test_cluster_weights_accept_comma_string(self):
        cfg = PipelineConfig(cluster_weights="1,2,3,4,5,6")

        assert cfg.cluster_weights == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)

    def test_scalar_cluster_weight_is_broadcast(self):
        cfg = PipelineConfig(cluster_weights=0.5)

        assert cfg.cluster_weights == (0.5,) * config.CLUSTER_FEATURES

    @pytest.mark.parametrize("weights", ["1,2,3", "1,1,1,1,1,-1"])
    def test_rejects_bad_cluster_weights(self, weights: str):
        with pytest.raises(ValidationError, match="cluster_weights"):
            PipelineConfig(cluster_weights=weights)

    def test_zero_radius_scales_with_resolution(self):
        assert PipelineConfig().radius_for(64, 64) == 8
        assert PipelineConfig(nms_radius=5).radius_for(64, 64) == 5

    def test_flat_snapshot_survives_key_value_file(
        self, temp_dir: Path, tiny_pipeline_config: PipelineConfig
    ):
        KeyValueFile.save(temp_dir / "config.txt", tiny_pipeline_config.flat())

        restored = PipelineConfig.from_flat(KeyValueFile.load(temp_dir / "config.txt"))

        assert restored == tiny_pipeline_config

    def test_from_flat_rejects_unknown_keys(self):
        with pytest.raises(ValidationError):
            PipelineConfig.from_flat({"k": 4, "part_count": 4})


class TestPartFeatures:
    """Tests for part_features focusing on the (k+1)*D layout"""

    def test_no_boxes_gives_global_then_zeros(
        self, tiny_model: PipelineModel, random_image
    ):
        estimator = PartEstimator(tiny_model)
        img = random_image(16, 16)
        dim = tiny_model.feature_dim

        features = estimator.part_features(img, [])

        assert features.shape == ((tiny_model.k + 1) * dim,)
        np.testing.assert_array_equal(features[:dim], estimator.global_features(img))
        assert np.all(features[dim:] == 0)

    def test_whole_image_box_repeats_global_features(
        self, tiny_model: PipelineModel, random_image
    ):
        estimator = PartEstimator(tiny_model)
        img = random_image(16, 16)
        dim = tiny_model.feature_dim

        features = estimator.part_features(img, [PartBox(0, 0, 15, 15, rank=1)])

        np.testing.assert_allclose(features[dim : 2 * dim], features[:dim], atol=1e-6)

    def test_identical_boxes_fill_identical_slots(
        self, tiny_model: PipelineModel, random_image
    ):
        img = random_image(16, 16)
        dim = tiny_model.feature_dim
        boxes = [PartBox(2, 3, 9, 10, rank=1), PartBox(2, 3, 9, 10, rank=2)]

        features = extract_part_features(img, boxes, tiny_model)

        np.testing.assert_array_equal(
            features[dim : 2 * dim], features[2 * dim : 3 * dim]
        )

    def test_slots_follow_box_rank(self, tiny_model: PipelineModel, random_image):
        estimator = PartEstimator(tiny_model)
        img = random_image(16, 16)
        first, second = PartBox(0, 0, 7, 7, rank=1), PartBox(8, 8, 15, 15, rank=2)

        in_order = estimator.part_features(img, [first, second])
        reversed_order = estimator.part_features(img, [second, first])

        np.testing.assert_array_equal(in_order, reversed_order)

    def test_rejects_more_boxes_than_k(self, tiny_model: PipelineModel, random_image):
        boxes = [PartBox(0, 0, 3, 3, rank=r) for r in range(1, tiny_model.k + 2)]

        with pytest.raises(UsageError, match="exceed k"):
            extract_part_features(random_image(16, 16), boxes, tiny_model)

    def test_box_outside_image_is_internal_error(
        self, tiny_model: PipelineModel, random_image
    ):
        with pytest.raises(CsPartsError, match="internal error"):
            extract_part_features(
                random_image(16, 16), [PartBox(8, 8, 16, 12, rank=1)], tiny_model
            )


class TestPartEstimator:
    """Tests for PartEstimator focusing on estimation and classification"""

    def test_boxes_respect_k_bounds_and_rank(self, tiny_model: PipelineModel, tiny_dataset):
        for img in _test_images(tiny_dataset):
            _, boxes = estimate_parts(img, tiny_model)

            assert len(boxes) <= tiny_model.k
            assert [b.rank for b in boxes] == sorted(b.rank for b in boxes)
            for box in boxes:
                assert 0 <= box.x0 <= box.x1 < img.width
                assert 0 <= box.y0 <= box.y1 < img.height
                assert box.recall == 1.0

    def test_estimation_is_deterministic(self, tiny_model: PipelineModel, tiny_dataset):
        img = _test_images(tiny_dataset)[0]

        first = estimate_parts(img, tiny_model)
        second = estimate_parts(img, tiny_model)

        assert first == second

    def test_channels_come_from_the_initial_class(
        self, tiny_model: PipelineModel, tiny_dataset
    ):
        estimator = PartEstimator(tiny_model)
        img = _test_images(tiny_dataset)[0]

        with_fs = estimator.estimate(img, use_feature_selection=True)
        without_fs = estimator.estimate(img, use_feature_selection=False)

        expected = selected_channels(tiny_model.selection, with_fs.initial_class)
        assert with_fs.channels == expected.indices
        assert without_fs.channels == tuple(range(tiny_model.feature_dim))

    def test_classify_matches_final_model_on_part_features(
        self, tiny_model: PipelineModel, tiny_dataset
    ):
        estimator = PartEstimator(tiny_model)
        for img in _test_images(tiny_dataset):
            _, features = estimator.describe(img)

            label, scores = classify(img, tiny_model)

            expected_label, expected_scores = predict(tiny_model.final, features)
            assert label == expected_label
            np.testing.assert_array_equal(scores, expected_scores)

    def test_empty_selection_falls_back_to_global_features(
        self, tiny_model: PipelineModel, random_image
    ):
        selection = dataclasses.replace(
            tiny_model.selection,
            weights=np.zeros_like(tiny_model.selection.weights),
        )
        model = dataclasses.replace(tiny_model, selection=selection)
        estimator = PartEstimator(model)
        img = random_image(16, 16)

        estimate, features = estimator.describe(img)

        assert estimate.boxes == ()
        assert estimate.channels == ()
        assert np.all(features[model.feature_dim :] == 0)

    def test_classify_without_ablation_model_raises(
        self, tiny_model: PipelineModel, random_image
    ):
        model = dataclasses.replace(tiny_model, final_no_fs=None)

        with pytest.raises(UsageError, match="train_ablation"):
            PartEstimator(model).classify(random_image(16, 16), use_feature_selection=False)

    def test_model_rejects_mismatched_final_dim(self, tiny_model: PipelineModel):
        with pytest.raises(UsageError, match=r"\(k\+1\)\*D"):
            dataclasses.replace(
                tiny_model, config=tiny_model.config.model_copy(update={"k": 5})
            )

    def test_prepare_image_resizes_and_replicates_gray(self, tiny_model: PipelineModel):
        img = Image(np.full((32, 24, 1), 0.25))

        prepared = prepare_image(img, tiny_model.backbone)

        assert prepared.shape == (16, 16, 3)
        np.testing.assert_allclose(prepared.data, 0.25, atol=1e-6)


class TestPipelineTrainer:
    """Tests for PipelineTrainer focusing on stages and failures"""

    def test_trained_model_has_both_final_classifiers(self, tiny_model: PipelineModel):
        dim = (tiny_model.k + 1) * tiny_model.feature_dim

        assert tiny_model.final.dim == dim
        assert tiny_model.final_no_fs is not None
        assert tiny_model.final_no_fs.dim == dim
        assert tiny_model.selection.classes == (0, 1, 2)

    def test_records_every_stage_and_skips_ablation(
        self, tiny_dataset, tiny_pipeline_config: PipelineConfig
    ):
        train, _ = tiny_dataset
        cfg = tiny_pipeline_config.model_copy(update={"train_ablation": False})
        trainer = PipelineTrainer(cfg)

        model = trainer.fit([r.image for r in train], [r.label for r in train])

        assert list(trainer.timings) == [
            "train_backbone",
            "global_features",
            "feature_selection",
            "part_features",
            "final_classifier",
        ]
        assert model.final_no_fs is None
        assert len(trainer.backbone_losses) == cfg.train.epochs + 1

    def test_stage_failure_names_the_stage(
        self, monkeypatch, tiny_dataset, tiny_pipeline_config: PipelineConfig
    ):
        train, _ = tiny_dataset

        def diverge(*args, **kwargs):
            raise NumericError("solver produced NaN")

        monkeypatch.setattr(pipeline, "fit_ovr", diverge)

        with pytest.raises(StageError) as excinfo:
            PipelineTrainer(tiny_pipeline_config).fit(
                [r.image for r in train], [r.label for r in train]
            )

        assert excinfo.value.stage == "feature_selection"
        assert excinfo.value.exit_code == config.EXIT_NUMERIC

    def test_rejects_single_class(self, random_image):
        with pytest.raises(UsageError, match="at least 2 classes"):
            PipelineTrainer().fit([random_image(), random_image()], [1, 1])

    def test_rejects_label_count_mismatch(self, random_image):
        with pytest.raises(UsageError, match="labels"):
            PipelineTrainer().fit([random_image()], [0, 1])


class TestModelBundle:
    """Tests for save_bundle/load_bundle focusing on completeness"""

    def test_save_then_load_is_bit_exact(self, temp_dir: Path, tiny_model: PipelineModel):
        save_bundle(tiny_model, temp_dir)

        loaded = load_bundle(temp_dir)

        assert loaded.same_as(tiny_model)

    def test_loaded_bundle_classifies_identically(
        self, temp_dir: Path, tiny_model: PipelineModel, tiny_dataset
    ):
        save_bundle(tiny_model, temp_dir)
        loaded = load_bundle(temp_dir)

        for img in _test_images(tiny_dataset):
            assert classify(img, loaded)[0] == classify(img, tiny_model)[0]

    @pytest.mark.parametrize("member", ["backbone", "selection_meta", "final"])
    def test_missing_member_raises_missing_artifact(
        self, temp_dir: Path, tiny_model: PipelineModel, member: str
    ):
        save_bundle(tiny_model, temp_dir)
        (temp_dir / config.BUNDLE_FILES[member]).unlink()

        with pytest.raises(MissingArtifactError, match=config.BUNDLE_FILES[member]):
            load_bundle(temp_dir)

    def test_ablation_classifier_is_optional(
        self, temp_dir: Path, tiny_model: PipelineModel
    ):
        save_bundle(dataclasses.replace(tiny_model, final_no_fs=None), temp_dir)

        assert load_bundle(temp_dir).final_no_fs is None

    def test_run_config_keys_in_snapshot_are_ignored(
        self, temp_dir: Path, tiny_model: PipelineModel
    ):
        save_bundle(tiny_model, temp_dir)
        snapshot = temp_dir / config.RUN_CONFIG_FILENAME
        values = KeyValueFile.load(snapshot)
        values.update({"dataset_dir": "data", "num_classes": 3})
        KeyValueFile.save(snapshot, values)

        assert load_bundle(temp_dir).config == tiny_model.config

    def test_invalid_snapshot_value_raises_data_format(
        self, temp_dir: Path, tiny_model: PipelineModel
    ):
        save_bundle(tiny_model, temp_dir)
        snapshot = temp_dir / config.RUN_CONFIG_FILENAME
        values = KeyValueFile.load(snapshot)
        values["k"] = 0
        KeyValueFile.save(snapshot, values)

        with pytest.raises(DataFormatError, match=config.RUN_CONFIG_FILENAME):
            load_bundle(temp_dir)
