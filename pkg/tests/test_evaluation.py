import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hgrnet.data import DatasetSplit
from hgrnet.errors import ConfigurationError, ContractError, DataError
from hgrnet.evaluation import (
    EvalReport,
    benchmark_latency,
    class_scores,
    confusion,
    evaluate_recognition,
    evaluate_segmentation,
    f_score,
    macro_f_score,
    micro_f_score,
    nearest_neighbor_accuracy,
    pixel_counts,
    pixel_f_score,
)
from hgrnet.models import StreamClassifier
from hgrnet.tensor import get_num_threads
from tests.conftest import SMALL

labels = st.lists(st.integers(min_value=0, max_value=4), min_size=1, max_size=40)


class TestFScore:
    def test_harmonic_mean(self):
        assert f_score(0.5, 1.0) == pytest.approx(2.0 / 3.0)
        assert f_score(0.0, 0.0) == 0.0

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_bounded_by_inputs(self, p, r):
        f = f_score(p, r)
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12


class TestConfusion:
    def test_rows_are_targets(self):
        matrix = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)
        np.testing.assert_array_equal(matrix.counts, [[1, 0, 0], [0, 1, 0], [0, 1, 1]])
        np.testing.assert_allclose(matrix.recall(), [1.0, 1.0, 0.5])
        np.testing.assert_allclose(matrix.precision(), [1.0, 0.5, 1.0])

    def test_macro_and_micro(self):
        matrix = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)
        assert micro_f_score(matrix) == pytest.approx(0.75)
        assert macro_f_score(matrix) == pytest.approx((1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0)

    def test_absent_class_scores_zero(self):
        matrix = confusion([0, 0], [0, 0], 3)
        np.testing.assert_array_equal(matrix.f1(), [1.0, 0.0, 0.0])

    @settings(max_examples=50)
    @given(labels, st.permutations(range(5)), st.randoms(use_true_random=False))
    def test_relabelling_permutes_matrix(self, true, perm, random):
        pred = [random.randrange(5) for _ in true]
        perm = np.asarray(perm)
        base = confusion(pred, true, 5)
        relabelled = confusion(perm[pred], perm[true], 5)
        np.testing.assert_array_equal(relabelled.counts[np.ix_(perm, perm)], base.counts)
        assert micro_f_score(relabelled) == pytest.approx(micro_f_score(base))
        assert macro_f_score(relabelled) == pytest.approx(macro_f_score(base))

    @settings(max_examples=50)
    @given(labels)
    def test_perfect_predictions(self, true):
        matrix = confusion(true, true, 5)
        assert micro_f_score(matrix) == 1.0
        assert matrix.total == len(true)

    def test_out_of_range_labels(self):
        with pytest.raises(DataError):
            confusion([3], [0], 3)
        with pytest.raises(DataError):
            confusion([0, 1], [0], 3)

    def test_empty_matrix(self):
        with pytest.raises(DataError):
            macro_f_score(confusion([], [], 3))

    def test_frame_and_row_normalisation(self):
        matrix = confusion([0, 1, 1], [0, 0, 1], 2)
        frame = matrix.to_frame(["fist", "palm"])
        assert frame.loc["fist", "palm"] == 1
        np.testing.assert_allclose(matrix.row_normalized(), [[0.5, 0.5], [0.0, 1.0]])
        assert [c.support for c in class_scores(matrix)] == [2, 1]


class TestPixelScore:
    def test_counts(self):
        pred = np.array([0.9, 0.6, 0.2, 0.4])
        truth = np.array([1.0, 0.0, 1.0, 0.0])
        assert pixel_counts(pred, truth) == (1, 1, 1)
        assert pixel_f_score(pred, truth) == pytest.approx(0.5)

    @settings(max_examples=30)
    @given(arrays(np.float64, (2, 6, 6, 1), elements=st.floats(0.0, 1.0)))
    def test_self_agreement(self, truth):
        binary = (truth >= 0.5).astype(float)
        expected = 1.0 if binary.any() else 0.0
        assert pixel_f_score(binary, binary) == expected

    def test_pooled_over_images(self):
        truth = np.zeros((2, 4, 4, 1))
        truth[0, :2] = 1.0
        pred = truth.copy()
        pred[1, 0, 0] = 1.0
        tp, fp, fn = pixel_counts(pred, truth)
        assert (tp, fp, fn) == (8, 1, 0)
        assert pixel_f_score(pred, truth) == pytest.approx(2 * 8 / 9 / (8 / 9 + 1))

    def test_threshold_and_shape_checked(self):
        with pytest.raises(ConfigurationError):
            pixel_f_score(np.zeros(3), np.zeros(3), threshold=1.0)
        with pytest.raises(DataError):
            pixel_f_score(np.zeros(3), np.zeros(4))


class TestReports:
    def test_recognition_report(self, tiny_validation, tmp_path):
        def oracle(images):
            # Looks up the matching sample so every prediction is right.
            index = [int(np.argmin([np.abs(s.image - img).sum() for s in tiny_validation.samples])) for img in images]
            return tiny_validation.labels()[index]

        report, matrix = evaluate_recognition(oracle, tiny_validation, "appearance_stream", batch_size=3)
        assert report.macro_f_score == 1.0 and report.micro_f_score == 1.0
        written = report.write(tmp_path)
        assert [p.name for p in written] == ["report.txt", "report.json", "confusion.csv"]
        payload = json.loads((tmp_path / "report.json").read_text())
        assert payload["num_samples"] == len(tiny_validation)
        frame = pd.read_csv(tmp_path / "confusion.csv", index_col=0)
        assert frame.values.trace() == len(tiny_validation)
        assert "macro F-score: 1.0000" in (tmp_path / "report.txt").read_text()

    def test_segmentation_report(self, tiny_validation, tmp_path):
        report, maps = evaluate_segmentation(lambda images: np.full(images.shape[:3] + (1,), 0.9), tiny_validation)
        assert maps.shape == tiny_validation.masks().shape
        assert 0.0 < report.pixel_f_score < 1.0
        assert report.confusion is None
        assert [p.name for p in report.write(tmp_path)] == ["report.txt", "report.json"]

    def test_needs_masks_or_labels(self, tiny_validation):
        empty = DatasetSplit(tiny_validation.role, [], tiny_validation.num_classes)
        with pytest.raises(DataError):
            evaluate_segmentation(lambda x: x, empty)
        with pytest.raises(DataError):
            evaluate_recognition(lambda x: x, empty, "hgrnet")

    def test_report_validates_scores(self):
        with pytest.raises(ValueError):
            EvalReport(model_kind="hgrnet", split="test", num_samples=1, macro_f_score=1.5)


class TestLatency:
    def test_stats_are_consistent(self):
        model = StreamClassifier("appearance", 4, SMALL).eval()
        before = get_num_threads()
        results = benchmark_latency(model, (1, SMALL, SMALL, 3), warmup=1, iters=3, thread_counts=[1, 2])
        assert get_num_threads() == before
        assert [r.mode for r in results] == ["single-threaded", "multi-threaded"]
        for stats in results:
            assert len(stats.timings_ms) == 3
            assert min(stats.timings_ms) <= stats.median_ms <= stats.p95_ms <= max(stats.timings_ms)
            assert stats.parameter_count == 110506 - 6 * 65
            assert "published reference 23 ms" in stats.to_text()

    def test_requires_eval_mode(self):
        with pytest.raises(ContractError):
            benchmark_latency(StreamClassifier("appearance", 4, SMALL), (1, SMALL, SMALL, 3))

    def test_iteration_counts_validated(self):
        model = StreamClassifier("appearance", 4, SMALL).eval()
        with pytest.raises(ConfigurationError):
            benchmark_latency(model, (1, SMALL, SMALL, 3), warmup=0)


def test_nearest_neighbor_baseline(tiny_train, tiny_validation):
    accuracy = nearest_neighbor_accuracy(tiny_train, tiny_validation)
    assert 0.0 <= accuracy <= 1.0
    assert nearest_neighbor_accuracy(tiny_train, tiny_train) == 1.0
