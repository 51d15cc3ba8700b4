"""Metric suite vs hand confusion matrices, pair counting, and ROC area."""

import numpy as np
import pytest

from pedcross.errors import LengthMismatch, OneClassOnly
from pedcross.metrics import auc, metrics


def auc_pair_oracle(scores, labels):
    """Count concordant pairs directly; ties worth one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def roc_trapezoid_oracle(scores, labels):
    """Area under the ROC polygon swept over all distinct thresholds."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    points = [(0.0, 0.0)]
    for thr in sorted(set(scores), reverse=True):
        preds = scores >= thr
        tpr = np.sum(preds & (labels == 1)) / n_pos
        fpr = np.sum(preds & (labels == 0)) / n_neg
        points.append((fpr, tpr))
    points.append((1.0, 1.0))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


class TestAuc:
    def test_hand_pairs(self):
        assert auc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == pytest.approx(0.75, abs=1e-12)

    def test_perfect_separation(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(0)
        scores = rng.random(10_000)
        labels = rng.integers(0, 2, size=10_000)
        assert auc(scores, labels) == pytest.approx(0.5, abs=0.02)

    def test_one_class_raises(self):
        with pytest.raises(OneClassOnly):
            auc([0.1, 0.9], [1, 1])

    def test_matches_pair_oracle_with_ties(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(4, 30))
            scores = rng.integers(0, 5, size=n) / 4.0   # coarse grid forces ties
            labels = rng.integers(0, 2, size=n)
            if labels.sum() in (0, n):
                continue
            assert auc(scores, labels) == pytest.approx(
                auc_pair_oracle(scores, labels), abs=1e-12)

    def test_matches_trapezoid_up_to_1000(self):
        rng = np.random.default_rng(2)
        for n in (10, 100, 1000):
            scores = np.round(rng.random(n), 2)
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            assert auc(scores, labels) == pytest.approx(
                roc_trapezoid_oracle(scores, labels), abs=1e-12)


class TestMetrics:
    def test_hand_confusion(self):
        rep = metrics([0.9, 0.2, 0.6, 0.4], [1, 0, 0, 1])
        assert (rep.tp, rep.fp, rep.tn, rep.fn) == (1, 1, 1, 1)
        assert rep.acc == rep.precision == rep.recall == rep.f1 == 0.5

    def test_perfect(self):
        rep = metrics([0.99, 0.98, 0.01, 0.02], [1, 1, 0, 0])
        assert rep.acc == rep.precision == rep.recall == rep.f1 == 1.0
        assert rep.auc == 1.0

    def test_degenerate_all_negative_predictions(self):
        rep = metrics([0.1, 0.2, 0.3], [1, 0, 1])
        assert rep.recall == 0.0 and rep.precision == 0.0 and rep.f1 == 0.0

    def test_threshold_inclusive(self):
        rep = metrics([0.5], [1], threshold=0.5)
        assert rep.tp == 1 and rep.fn == 0

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            metrics([0.5, 0.6], [1])

    def test_agrees_with_predict_then_count(self):
        rng = np.random.default_rng(3)
        scores = rng.random(200)
        labels = rng.integers(0, 2, size=200)
        rep = metrics(scores, labels)
        preds = (scores >= 0.5).astype(int)
        assert rep.acc == pytest.approx(np.mean(preds == labels), abs=1e-15)
        assert rep.tp == int(np.sum((preds == 1) & (labels == 1)))

    def test_f1_harmonic_mean(self):
        rng = np.random.default_rng(4)
        scores = rng.random(100)
        labels = rng.integers(0, 2, size=100)
        rep = metrics(scores, labels)
        if rep.precision > 0 and rep.recall > 0:
            expect = 2 * rep.precision * rep.recall / (rep.precision + rep.recall)
            assert rep.f1 == pytest.approx(expect, abs=1e-12)

    def test_single_class_auc_is_none(self):
        rep = metrics([0.9, 0.1], [1, 1])
        assert rep.auc is None

    def test_report_round_trips_to_dict(self):
        rep = metrics([0.9, 0.1], [1, 0], config={"tag": "x"})
        d = rep.to_dict()
        assert d["acc"] == 1.0 and d["config"] == {"tag": "x"} and d["n"] == 2
