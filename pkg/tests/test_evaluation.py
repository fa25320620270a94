import dataclasses
from pathlib import Path

import numpy as np
import pytest

from backbone import FeatureExtractor
from errors import UsageError
from evaluation import (
    EvalReport,
    ImageRecord,
    Variant,
    accuracy,
    confusion_matrix,
    evaluate,
    log_scaled,
)
from file_ops import CsvFile, KeyValueFile
from grid import resize_bilinear
from parts import PartBox
from pipeline import PipelineConfig, PipelineModel, classify, train_pipeline
from sparse_linear import Regularization, fit_ovr, predict, sparsity_report
from synthgen import SynthConfig, SynthRecord, generate

ALL_VARIANTS = (Variant.BASELINE, Variant.NO_FS, Variant.FS)
BENCHMARK_SEEDS = (0, 1, 2)


def _report(labels, predictions) -> EvalReport:
    records = tuple(
        ImageRecord(
            image_id=f"test_{i:06d}",
            label=label,
            initial_class=predicted,
            predictions={Variant.FS: predicted},
        )
        for i, (label, predicted) in enumerate(zip(labels, predictions))
    )
    return EvalReport(
        classes=(0, 1, 2),
        confusions={Variant.FS: confusion_matrix(labels, predictions, (0, 1, 2))},
        records=records,
    )


class TestConfusionMatrix:
    """Tests for confusion_matrix and accuracy focusing on counting rules"""

    def test_all_correct_is_diagonal(self):
        matrix = confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], (0, 1, 2))

        np.testing.assert_array_equal(matrix, np.diag([1, 1, 2]))
        assert accuracy(matrix) == 1.0

    def test_single_wrong_prediction(self):
        matrix = confusion_matrix([1], [2], (0, 1, 2))

        assert matrix[1, 2] == 1
        assert matrix.sum() == 1
        assert accuracy(matrix) == 0.0

    def test_row_sums_are_class_counts(self):
        labels = [0, 0, 1, 2, 2, 2]

        matrix = confusion_matrix(labels, [1, 0, 1, 0, 2, 2], (0, 1, 2))

        assert matrix.sum(axis=1).tolist() == [2, 1, 3]
        assert accuracy(matrix) == pytest.approx(4 / 6)

    def test_empty_matrix_has_zero_accuracy(self):
        assert accuracy(np.zeros((3, 3), dtype=np.int64)) == 0.0

    def test_rejects_unknown_class(self):
        with pytest.raises(UsageError, match="class 5"):
            confusion_matrix([0, 5], [0, 0], (0, 1, 2))

    def test_log_scaling_spans_unit_interval(self):
        scaled = log_scaled(np.array([[0, 3], [1, 7]]))

        assert scaled.min() == 0.0
        assert scaled.max() == 1.0
        assert np.all(log_scaled(np.zeros((2, 2))) == 0)


class TestEvalReport:
    """Tests for EvalReport focusing on summaries and written files"""

    def test_primary_variant_is_the_last_evaluated(self):
        report = _report([0, 1], [0, 0])

        assert report.primary is Variant.FS
        assert report.accuracy == 0.5

    def test_accuracy_of_missing_variant_raises(self):
        with pytest.raises(UsageError, match="no_fs was not evaluated"):
            _report([0], [0]).accuracy_of(Variant.NO_FS)

    def test_write_creates_every_artifact(self, temp_dir: Path):
        report = _report([0, 1, 2], [0, 2, 2])

        report.write(temp_dir / "out")

        for name in ("confusion_fs.csv", "confusion.pgm", "records.csv", "boxes.csv", "summary.txt"):
            assert (temp_dir / "out" / name).is_file()
        rows = CsvFile.read(temp_dir / "out" / "confusion_fs.csv")
        assert [row["2"] for row in rows] == ["0", "1", "1"]
        summary = KeyValueFile.load(temp_dir / "out" / "summary.txt")
        assert summary["num_images"] == 3
        assert summary["accuracy_fs"] == pytest.approx(2 / 3)

    def test_confusion_image_upscales_each_cell(self, temp_dir: Path):
        _report([0, 1, 2], [0, 1, 2]).write(temp_dir)

        payload = (temp_dir / "confusion.pgm").read_bytes()

        assert payload.startswith(b"P5\n24 24\n255\n")

    def test_records_leave_unevaluated_columns_blank(self):
        record = ImageRecord(
            image_id="test_000000",
            label=0,
            initial_class=1,
            predictions={Variant.BASELINE: 1, Variant.FS: 0},
            boxes=(PartBox(0, 0, 7, 7, rank=1),),
            ious={Variant.FS: 0.25},
        )

        assert record.csv_row() == (
            "test_000000", 0, 1, "1", "", "0", 1, "", "0.250000"
        )
        assert record.final_class == 0

    def test_format_lists_each_variant(self):
        text = _report([0, 1], [0, 1]).format()

        assert text.splitlines()[1].startswith("fs")
        assert "1.0000" in text


class TestEvaluate:
    """Tests for evaluate focusing on agreement with classify"""

    def test_fs_predictions_match_classify(self, tiny_model: PipelineModel, tiny_dataset):
        _, test = tiny_dataset

        report = evaluate(test, tiny_model, ALL_VARIANTS)

        expected = [classify(r.image, tiny_model)[0] for r in test]
        assert [r.predictions[Variant.FS] for r in report.records] == expected
        correct = sum(e == r.label for e, r in zip(expected, test))
        assert report.accuracy == pytest.approx(correct / len(test))

    def test_baseline_is_the_selection_prediction(
        self, tiny_model: PipelineModel, tiny_dataset
    ):
        _, test = tiny_dataset
        extractor = FeatureExtractor(tiny_model.backbone)

        report = evaluate(test, tiny_model, [Variant.BASELINE])

        for record, row in zip(test, report.records):
            g = extractor.forward(record.image)[1].data
            assert row.predictions == {Variant.BASELINE: predict(tiny_model.selection, g)[0]}
        assert report.variants == [Variant.BASELINE]

    def test_matrix_rows_match_class_counts(self, tiny_model: PipelineModel, tiny_dataset):
        _, test = tiny_dataset

        report = evaluate(test, tiny_model, ALL_VARIANTS)

        for matrix in report.confusions.values():
            assert matrix.sum(axis=1).tolist() == [2, 2, 2]

    def test_ious_are_recorded_at_input_size(
        self, tiny_model: PipelineModel, tiny_dataset
    ):
        _, test = tiny_dataset

        report = evaluate(test, tiny_model, ALL_VARIANTS)

        for row in report.records:
            assert set(row.ious) == {Variant.NO_FS, Variant.FS}
            assert all(0.0 <= v <= 1.0 for v in row.ious.values())

    def test_resized_records_skip_iou(self, tiny_model: PipelineModel, tiny_dataset):
        _, test = tiny_dataset
        larger = [
            SynthRecord(resize_bilinear(r.image, 32, 32), r.label, r.glyph_box, r.split, r.index)
            for r in test[:2]
        ]

        report = evaluate(larger, tiny_model)

        assert all(row.ious == {} for row in report.records)
        assert report.mean_iou(Variant.FS) is None

    def test_no_fs_requires_ablation_classifier(
        self, tiny_model: PipelineModel, tiny_dataset
    ):
        _, test = tiny_dataset
        model = dataclasses.replace(tiny_model, final_no_fs=None)

        with pytest.raises(UsageError, match="train_ablation"):
            evaluate(test, model, [Variant.NO_FS])

    def test_rejects_empty_variant_list(self, tiny_model: PipelineModel, tiny_dataset):
        _, test = tiny_dataset

        with pytest.raises(UsageError, match="at least one"):
            evaluate(test, tiny_model, [])


@pytest.fixture(scope="module")
def benchmark_runs() -> dict[int, tuple[PipelineModel, EvalReport, list]]:
    """Glyph benchmark trained and evaluated once per seed"""
    runs = {}
    for seed in BENCHMARK_SEEDS:
        train, test = generate(SynthConfig(seed=seed))
        model = train_pipeline(
            [r.image for r in train],
            [r.label for r in train],
            PipelineConfig(seed=seed),
        )
        runs[seed] = (model, evaluate(test, model, ALL_VARIANTS), train)
    return runs


@pytest.mark.slow
class TestGlyphBenchmark:
    """Tests for the full pipeline focusing on glyph benchmark trends"""

    def test_feature_selection_beats_baseline_and_matches_ablation(self, benchmark_runs):
        reports = [report for _, report, _ in benchmark_runs.values()]

        fs = np.mean([r.accuracy_of(Variant.FS) for r in reports])
        no_fs = np.mean([r.accuracy_of(Variant.NO_FS) for r in reports])
        baseline = np.mean([r.accuracy_of(Variant.BASELINE) for r in reports])

        assert fs >= no_fs - 0.01
        assert fs >= baseline + 0.02

    def test_selected_parts_localize_the_glyph(self, benchmark_runs):
        reports = [report for _, report, _ in benchmark_runs.values()]

        fs = np.mean([r.mean_iou(Variant.FS) for r in reports])
        no_fs = np.mean([r.mean_iou(Variant.NO_FS) for r in reports])

        assert fs > no_fs

    def test_boxes_have_full_recall_inside_images(self, benchmark_runs):
        size = SynthConfig().image_size
        for _, report, _ in benchmark_runs.values():
            for row in report.records:
                for box in row.boxes:
                    assert box.recall == 1.0
                    assert 0 <= box.x0 <= box.x1 < size
                    assert 0 <= box.y0 <= box.y1 < size

    def test_sparsity_shrinks_with_lambda(self, benchmark_runs):
        model, _, train = benchmark_runs[0]
        features = FeatureExtractor(model.backbone).features([r.image for r in train])
        labels = [r.label for r in train]

        weak = fit_ovr(features, labels, Regularization.L1, 0.01)
        strong = fit_ovr(features, labels, Regularization.L1, 1.0)

        weak_counts = [row.nonzero for row in sparsity_report(weak).rows]
        strong_counts = [row.nonzero for row in sparsity_report(strong).rows]
        assert all(s <= w for s, w in zip(strong_counts, weak_counts))
        assert sparsity_report(model.selection).mean_percent < 25.0
