"""Confusion-matrix metrics and map rendering."""

import numpy as np
import pytest

from polsarcl.metrics import (
    DEFAULT_PALETTE,
    ConfusionMatrix,
    confusion_to_csv,
    evaluate_predictions,
    metrics,
    render_map,
    sweep_rows_to_csv,
)


class TestMetrics:
    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(np.diag([10, 20, 30]))
        oa, aa, kappa = metrics(cm)
        assert (oa, aa, kappa) == (1.0, 1.0, 1.0)

    def test_symmetric_two_class_example(self):
        cm = ConfusionMatrix(np.array([[45, 5], [5, 45]]))
        oa, aa, kappa = metrics(cm)
        assert oa == pytest.approx(0.9)
        assert aa == pytest.approx(0.9)
        assert kappa == pytest.approx(0.8)

    def test_uniform_matrix_zero_kappa(self):
        cm = ConfusionMatrix(np.full((4, 4), 7))
        _, _, kappa = metrics(cm)
        assert kappa == pytest.approx(0.0, abs=1e-12)

    def test_ranges_on_random_matrices(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            c = int(rng.integers(2, 6))
            cm = ConfusionMatrix(rng.integers(0, 50, size=(c, c)) + np.eye(c, dtype=int))
            oa, aa, kappa = metrics(cm)
            assert 0.0 <= oa <= 1.0
            assert 0.0 <= aa <= 1.0
            assert -1.0 <= kappa <= 1.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            c = int(rng.integers(2, 6))
            counts = rng.integers(0, 50, size=(c, c)) + np.eye(c, dtype=int)
            perm = rng.permutation(c)
            permuted = counts[np.ix_(perm, perm)]
            np.testing.assert_allclose(
                metrics(ConfusionMatrix(counts)),
                metrics(ConfusionMatrix(permuted)),
                atol=1e-12,
            )

    def test_oa_equals_aa_with_equal_row_sums(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            c = int(rng.integers(2, 5))
            counts = np.zeros((c, c), dtype=int)
            for i in range(c):
                row = rng.multinomial(100, np.ones(c) / c)
                counts[i] = row
            oa, aa, _ = metrics(ConfusionMatrix(counts))
            assert oa == pytest.approx(aa, abs=1e-12)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError):
            metrics(ConfusionMatrix(np.zeros((2, 2), dtype=int)))

    def test_missing_class_warns_and_excludes(self):
        counts = np.array([[10, 0, 0], [0, 0, 0], [2, 0, 8]])
        with pytest.warns(UserWarning, match="excluded"):
            _, aa, _ = metrics(ConfusionMatrix(counts))
        assert aa == pytest.approx((1.0 + 0.8) / 2)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(np.array([[1, -1], [0, 1]]))


class TestEvaluatePredictions:
    def test_unlabeled_pixels_ignored(self):
        labels = np.array([[0, 1], [2, 0]])
        pred = np.array([[2, 1], [1, 1]])
        cm = evaluate_predictions(labels, pred)
        assert cm.total == 2
        assert cm.counts[0, 0] == 1  # true 1 predicted 1
        assert cm.counts[1, 0] == 1  # true 2 predicted 1

    def test_exclusion_mask(self):
        labels = np.full((2, 2), 1)
        pred = np.full((2, 2), 1)
        exclude = np.array([[1, 0], [0, 0]])
        cm = evaluate_predictions(labels, pred, exclude=exclude, n_classes=2)
        assert cm.total == 3

    def test_all_excluded_rejected(self):
        labels = np.ones((2, 2), dtype=int)
        with pytest.raises(ValueError):
            evaluate_predictions(labels, labels, exclude=labels)


class TestRenderMap:
    def test_all_zero_is_black(self):
        ppm = render_map(np.zeros((2, 3), dtype=int))
        assert ppm.startswith(b"P6\n3 2\n255\n")
        assert ppm[len(b"P6\n3 2\n255\n"):] == b"\x00" * 18

    def test_known_palette_bytes(self):
        raster = np.array([[0, 1], [2, 0]])
        ppm = render_map(raster)
        body = ppm[len(b"P6\n2 2\n255\n"):]
        expected = bytes(
            [*DEFAULT_PALETTE[0], *DEFAULT_PALETTE[1],
             *DEFAULT_PALETTE[2], *DEFAULT_PALETTE[0]]
        )
        assert body == expected

    def test_label_outside_palette_rejected(self):
        with pytest.raises(ValueError):
            render_map(np.array([[99]]))

    def test_dimensions_match(self):
        ppm = render_map(np.zeros((5, 7), dtype=int))
        assert b"7 5" in ppm.split(b"\n", 2)[1]


class TestCsv:
    def test_confusion_csv_layout(self):
        cm = ConfusionMatrix(np.array([[1, 2], [3, 4]]))
        text = confusion_to_csv(cm)
        lines = text.strip().split("\n")
        assert lines[0] == "true_class,pred_1,pred_2"
        assert lines[1] == "1,1,2"
        assert lines[2] == "2,3,4"

    def test_sweep_csv_layout(self):
        rows = [
            dict(labeled_ratio=0.001, unlabeled_ratio=0.1, method="contrastive",
                 oa=0.9, aa=0.85, kappa=0.8, seed=7),
        ]
        text = sweep_rows_to_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == "labeled_ratio,unlabeled_ratio,method,oa,aa,kappa,seed"
        assert lines[1] == "0.001,0.1,contrastive,0.900000,0.850000,0.800000,7"
