"""Confusion matrices and metric arithmetic, against per-sample oracles."""

import numpy as np
import numpy.testing as npt
import pytest

from trifusion.errors import ContractError
from trifusion.layers import Module
from trifusion.metrics import (ConfusionMatrix, confusion, evaluate, metrics)
from trifusion.tensor import Tensor


class TestConfusion:
    def test_perfect_prediction_is_diagonal(self):
        cm = confusion([0, 1, 2, 1], [0, 1, 2, 1], 3)
        npt.assert_array_equal(cm.counts, np.diag([1, 2, 1]))

    def test_hand_counted_case(self):
        cm = confusion(preds=[0, 1, 1, 1], truth=[0, 0, 1, 1], num_classes=2)
        npt.assert_array_equal(cm.counts, [[1, 1], [0, 2]])

    def test_total_conserved(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(1, 200))
            k = int(rng.integers(2, 6))
            cm = confusion(rng.integers(0, k, n), rng.integers(0, k, n), k)
            assert cm.total == n

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            confusion([0, 2], [0, 1], 2)
        with pytest.raises(ContractError):
            confusion([0, 1], [0], 2)


class TestMetrics:
    def test_perfect_matrix_all_ones(self):
        rep = metrics(ConfusionMatrix(np.diag([7, 9])), positive_class=1)
        assert rep.accuracy == 1.0
        for c in rep.per_class:
            assert (c.precision, c.recall, c.f1) == (1.0, 1.0, 1.0)
        assert rep.weighted_f1 == rep.macro_f1 == 1.0

    def test_reported_accuracy_case(self):
        cm = ConfusionMatrix(np.array([[220, 14], [24, 366]]))
        rep = metrics(cm, positive_class=1,
                      class_names=["NORMAL", "PNEUMONIA"])
        assert abs(rep.accuracy - 0.9391) <= 0.00005
        assert rep.accuracy == 586 / 624

    def test_zero_denominator_flagged(self):
        # nothing predicted as class 1 and nothing truly class 1
        cm = ConfusionMatrix(np.array([[5, 0], [0, 0]]))
        rep = metrics(cm, positive_class=1)
        assert rep.per_class[1].precision == 0.0
        assert rep.per_class[1].recall == 0.0
        assert any("precision[1]" in f for f in rep.zero_division_flags)
        assert any("recall[1]" in f for f in rep.zero_division_flags)

    def test_empty_matrix_rejected(self):
        with pytest.raises(ContractError):
            metrics(ConfusionMatrix(np.zeros((2, 2), dtype=int)))

    def test_weighted_recall_equals_accuracy_exactly(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            k = int(rng.integers(2, 6))
            counts = rng.integers(0, 50, size=(k, k))
            if counts.sum() == 0:
                counts[0, 0] = 1
            # every class needs support for recall to be defined
            counts[np.arange(k), np.arange(k)] += 1
            rep = metrics(ConfusionMatrix(counts))
            assert rep.weighted_recall == rep.accuracy

    def test_against_per_sample_oracle(self):
        """Recompute precision/recall/F1/accuracy by brute-force counting
        over individual samples."""
        rng = np.random.default_rng(2)
        for _ in range(25):
            n, k = int(rng.integers(5, 300)), int(rng.integers(2, 5))
            truth = rng.integers(0, k, n)
            preds = rng.integers(0, k, n)
            rep = metrics(confusion(preds, truth, k))
            assert rep.accuracy == pytest.approx(np.mean(preds == truth),
                                                 abs=1e-12)
            for c in range(k):
                tp = int(np.sum((preds == c) & (truth == c)))
                predicted = int(np.sum(preds == c))
                actual = int(np.sum(truth == c))
                want_p = tp / predicted if predicted else 0.0
                want_r = tp / actual if actual else 0.0
                assert rep.per_class[c].precision == pytest.approx(
                    want_p, abs=1e-12)
                assert rep.per_class[c].recall == pytest.approx(
                    want_r, abs=1e-12)
                if want_p + want_r:
                    want_f = 2 * want_p * want_r / (want_p + want_r)
                    assert rep.per_class[c].f1 == pytest.approx(
                        want_f, abs=1e-12)

    def test_relabeling_equivariance(self):
        rng = np.random.default_rng(3)
        counts = rng.integers(1, 40, size=(4, 4))
        perm = rng.permutation(4)
        base = metrics(ConfusionMatrix(counts))
        permuted = metrics(ConfusionMatrix(counts[np.ix_(perm, perm)]))
        for new_idx, old_idx in enumerate(perm):
            a, b = permuted.per_class[new_idx], base.per_class[old_idx]
            assert (a.precision, a.recall, a.f1, a.support) == \
                (b.precision, b.recall, b.f1, b.support)

    def test_invariant_to_integer_scaling(self):
        rng = np.random.default_rng(4)
        counts = rng.integers(1, 30, size=(3, 3))
        base = metrics(ConfusionMatrix(counts))
        scaled = metrics(ConfusionMatrix(counts * 17))
        assert base.accuracy == scaled.accuracy
        assert base.weighted_f1 == scaled.weighted_f1
        for a, b in zip(base.per_class, scaled.per_class):
            assert (a.precision, a.recall, a.f1) == \
                (b.precision, b.recall, b.f1)


class FakeDataset:
    """Images whose first pixel encodes the label."""

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.class_names = ["neg", "pos"]

    def stacked(self):
        images = np.zeros((self.labels.size, 1))
        images[:, 0] = self.labels
        return images, self.labels


class ConstantModel(Module):
    num_classes = 2

    def forward(self, x, mode="eval"):
        logits = np.zeros((x.shape[0], 2))
        logits[:, 1] = 1.0
        return Tensor(logits)


class OracleModel(Module):
    """Reads the label back out of the fake image."""

    num_classes = 2

    def forward(self, x, mode="eval"):
        logits = np.zeros((x.shape[0], 2))
        logits[np.arange(x.shape[0]), x.data[:, 0].astype(int)] = 1.0
        return Tensor(logits)


class TestEvaluate:
    def test_constant_model_single_column(self):
        ds = FakeDataset([0, 0, 1, 1, 1])
        cm, rep = evaluate(ConstantModel(), ds)
        npt.assert_array_equal(cm.counts, [[0, 2], [0, 3]])
        assert rep.accuracy == 3 / 5

    def test_oracle_model_diagonal(self):
        ds = FakeDataset([0, 1, 0, 1, 1, 0])
        cm, rep = evaluate(OracleModel(), ds)
        npt.assert_array_equal(cm.counts, np.diag([3, 3]))
        assert rep.accuracy == 1.0

    def test_accuracy_matches_mean_agreement(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 2, 40)
        ds = FakeDataset(labels)
        cm, rep = evaluate(ConstantModel(), ds, batch_size=7)
        assert rep.accuracy == np.mean(labels == 1)
