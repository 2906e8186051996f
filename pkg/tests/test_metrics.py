import numpy as np
import pytest

from scoredm.metrics import (MlpClassifier, accuracy, auroc, auroc_separation, dp_gap, knn_auroc,
                             nll_under_prior, stratified_folds)
from scoredm.priors import Gaussian


def pairwise_auroc(scores, labels):
    """O(n^2) oracle: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return float(np.mean(diff > 0) + 0.5 * np.mean(diff == 0))


def circles(n, seed=0):
    rng = np.random.default_rng(seed)
    ang = rng.uniform(0, 2 * np.pi, 2 * n)
    r = np.concatenate([np.full(n, 1.0), np.full(n, 3.0)]) + 0.1 * rng.standard_normal(2 * n)
    return np.c_[r * np.cos(ang), r * np.sin(ang)], np.r_[np.zeros(n), np.ones(n)].astype(int)


class TestAuroc:
    def test_perfect_and_reversed(self):
        y = np.array([0, 0, 1, 1])
        assert auroc(np.array([0.1, 0.2, 0.8, 0.9]), y) == 1.0
        assert auroc(np.array([0.9, 0.8, 0.2, 0.1]), y) == 0.0

    def test_ties_count_half(self):
        assert auroc(np.zeros(4), np.array([0, 1, 0, 1])) == 0.5

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            s = np.round(rng.standard_normal(60), 1)
            y = rng.integers(0, 2, 60)
            assert auroc(s, y) == pytest.approx(pairwise_auroc(s, y), abs=1e-12)

    def test_single_class(self):
        with pytest.raises(ValueError):
            auroc(np.ones(3), np.ones(3))

    def test_rank_invariant(self):
        rng = np.random.default_rng(1)
        s, y = rng.standard_normal(50), rng.integers(0, 2, 50)
        assert auroc(np.exp(3 * s), y) == auroc(s, y)


class TestSeparation:
    def test_circles_separable_with_kernel(self):
        z, y = circles(60)
        res = auroc_separation(z, y)
        assert res.auroc > 0.99
        assert len(res.fold_scores) == 5
        assert len(res.grid) == 16

    def test_circles_defeat_linear_like_baseline(self):
        # a one-dimensional projection cannot separate concentric circles
        z, y = circles(60)
        assert abs(auroc(z[:, 0], y) - 0.5) < 0.15

    def test_random_labels_near_chance(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((200, 2))
        y = rng.integers(0, 2, 200)
        # best-of-grid selection is optimistic, but not by much on 200 points
        assert auroc_separation(z, y).auroc < 0.65

    def test_string_labels_and_non_binary(self):
        z, y = circles(20)
        res = auroc_separation(z, np.where(y == 1, "b", "a"))
        assert res.auroc > 0.95
        with pytest.raises(ValueError):
            auroc_separation(z, np.arange(len(z)) % 3)

    def test_knn_agrees_on_circles(self):
        z, y = circles(60)
        assert knn_auroc(z, y) > 0.99

    def test_deterministic(self):
        z, y = circles(30, seed=3)
        assert auroc_separation(z, y, seed=2).auroc == auroc_separation(z, y, seed=2).auroc

    def test_stratified_folds_partition(self):
        y = np.array([0] * 12 + [1] * 8)
        folds = stratified_folds(y, 4, np.random.default_rng(0))
        allidx = np.sort(np.concatenate(folds))
        np.testing.assert_array_equal(allidx, np.arange(20))
        assert all(np.sum(y[f]) == 2 for f in folds)


class TestNll:
    def test_standard_normal_expectation(self):
        z = np.random.default_rng(0).standard_normal((200000, 2))
        # E[-log N(z; 0, I_2)] = log(2 pi) + 1
        assert nll_under_prior(z, Gaussian.standard(2)) == pytest.approx(np.log(2 * np.pi) + 1, abs=0.01)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            nll_under_prior(np.zeros((3, 3)), Gaussian.standard(2))


class TestFairnessMetrics:
    def test_dp_gap_hand_value(self):
        assert dp_gap(np.array([1, 1, 0, 0, 1, 0]), np.array([0, 0, 0, 1, 1, 1])) == pytest.approx(1 / 3)

    def test_dp_gap_zero_for_constant(self):
        assert dp_gap(np.ones(6, dtype=int), np.array([0, 1] * 3)) == 0.0

    def test_dp_gap_errors(self):
        with pytest.raises(ValueError):
            dp_gap(np.ones(3, dtype=int), np.zeros(3, dtype=int))
        with pytest.raises(ValueError):
            dp_gap(np.array([0.5, 1.0]), np.array([0, 1]))
        with pytest.raises(ValueError):
            dp_gap(np.ones(3, dtype=int), np.array([0, 1]))

    def test_accuracy(self):
        assert accuracy(np.array([1, 0, 1]), np.array([1, 1, 1])) == pytest.approx(2 / 3)

    def test_classifier_learns_xor(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (400, 2))
        y = ((x[:, 0] > 0) ^ (x[:, 1] > 0)).astype(int)
        clf = MlpClassifier(2, seed=0, epochs=150).fit(x, y)
        assert accuracy(clf.predict(x), y) > 0.9
