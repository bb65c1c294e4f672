import math

import numpy as np
import pytest

from cpl.baselines import (conformal_rank, group_split_conformal, marginal_rule, split_conformal,
                           weighted_rule, weighted_split_conformal)
from cpl.data import Equals
from cpl.scores import AbsResidual, dataset_scores

from conftest import regression_dataset


def order_statistic(scores, alpha):
    """Sort-and-index oracle for the split-conformal rank."""
    s = sorted(scores)
    k = math.ceil(round((len(s) + 1) * (1 - alpha), 12))
    return math.inf if k > len(s) else s[k - 1]


def weighted_oracle(scores, weights, alpha, w_test):
    """Walk the sorted scores and stop once cumulative weight reaches the target."""
    total = sum(weights) + w_test
    acc = 0.0
    for s, w in sorted(zip(scores, weights)):
        acc += w
        if acc / total >= 1 - alpha - 1e-12:
            return s
    return math.inf


class TestSplitConformal:
    def test_one_to_ten(self):
        assert conformal_rank(10, 0.2) == 9
        assert split_conformal(np.arange(1.0, 11.0), 0.2) == 9.0

    def test_single_score(self):
        assert split_conformal([3.7], 0.5) == 3.7

    def test_unattainable_rank_is_infinite(self):
        assert split_conformal(np.arange(10.0), 0.01) == math.inf

    def test_empty(self):
        with pytest.raises(ValueError):
            split_conformal([], 0.1)

    def test_matches_sort_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 60))
            alpha = float(rng.uniform(0.01, 0.5))
            s = rng.normal(size=n)
            assert split_conformal(s, alpha) == order_statistic(s.tolist(), alpha)

    def test_monotone_in_alpha(self, rng):
        s = rng.exponential(size=200)
        qs = [split_conformal(s, a) for a in np.linspace(0.4, 0.01, 40)]
        assert all(b >= a for a, b in zip(qs, qs[1:]))

    @pytest.mark.slow
    def test_marginal_guarantee_monte_carlo(self):
        rng = np.random.default_rng(2024)
        n, alpha, M = 100, 0.1, 1000
        hits = 0
        for _ in range(M):
            cal = rng.standard_cauchy(n)
            test = rng.standard_cauchy()
            hits += test <= split_conformal(cal, alpha)
        cov = hits / M
        assert 0.90 - 0.01 <= cov <= 0.90 + 1 / 101 + 0.01


class TestWeighted:
    def test_uniform_weights_reduce_to_split(self, rng):
        for n in (5, 19, 50):
            s = rng.normal(size=n)
            assert weighted_split_conformal(s, np.full(n, 2.5), 0.1) == split_conformal(s, 0.1)

    def test_mass_on_largest_score(self):
        s = np.array([0.3, 1.0, 4.0, 2.0])
        w = np.array([0.0, 0.0, 1.0, 0.0])
        assert weighted_split_conformal(s, w, 0.1, test_weight=0.0) == 4.0

    def test_three_scores_enumeration(self):
        # cumulative weights 1, 2, 4 over a total of 4 + max weight 2 peak at 2/3 < 0.75
        s, w = [1.0, 2.0, 3.0], [1.0, 1.0, 2.0]
        assert weighted_oracle(s, w, 0.25, 2.0) == math.inf
        assert weighted_split_conformal(s, w, 0.25) == math.inf
        # with the test point weighted like the others the 0.75 level is reached at the top score
        assert weighted_split_conformal(s, w, 0.25, test_weight=1.0) == weighted_oracle(s, w, 0.25, 1.0) == 3.0

    def test_matches_enumeration_oracle(self, rng):
        for _ in range(50):
            n = int(rng.integers(1, 30))
            s = rng.normal(size=n)
            w = rng.uniform(0, 2, n)
            alpha = float(rng.uniform(0.05, 0.5))
            assert weighted_split_conformal(s, w, alpha) == weighted_oracle(s, w, alpha, w.max())

    def test_errors(self):
        with pytest.raises(ValueError):
            weighted_split_conformal([1.0, 2.0], [0.0, 0.0], 0.1)
        with pytest.raises(ValueError):
            weighted_split_conformal([1.0, 2.0], [1.0, -1.0], 0.1)
        with pytest.raises(ValueError):
            weighted_split_conformal([1.0, 2.0], [1.0], 0.1)

    def test_rule_uses_test_point_weight(self, rng):
        n = 50
        X = rng.uniform(-1, 1, size=(n, 1))
        ds = regression_dataset(X, np.zeros(n), rng.normal(size=n))
        wfn = lambda Z: np.exp(np.asarray(Z)[:, 0])
        rule = weighted_rule(ds, wfn, 0.1)
        Z = np.array([[-0.5], [0.8]])
        S = dataset_scores(AbsResidual(), ds)
        w = wfn(ds.X)
        got = rule.thresholds(Z)
        for i in range(2):
            assert got[i] == weighted_oracle(S.tolist(), w.tolist(), 0.1, float(wfn(Z[i:i + 1])[0]))


class TestGroup:
    def _data(self, rng, n=120):
        X = np.column_stack([rng.integers(0, 2, n), rng.integers(0, 2, n)]).astype(float)
        y = rng.normal(size=n) * (1 + 2 * X[:, 0])
        return regression_dataset(X, np.zeros(n), y)

    def test_disjoint_groups_reduce_to_per_group_split(self, rng):
        ds = self._data(rng)
        groups = [Equals(0, 0.0), Equals(0, 1.0)]
        rule = group_split_conformal(ds, groups, 0.1, combine="require-partition")
        S = dataset_scores(AbsResidual(), ds)
        for j, v in enumerate((0.0, 1.0)):
            assert rule.group_q[j] == order_statistic(S[ds.X[:, 0] == v].tolist(), 0.1)

    def test_max_policy_on_overlap(self):
        X = np.array([[0.0], [0.0], [1.0], [1.0]])
        ds = regression_dataset(X, np.zeros(4), [2.0, 2.0, 5.0, 5.0])
        groups = [lambda Z: np.asarray(Z)[:, 0] == 0.0, lambda Z: np.asarray(Z)[:, 0] >= 0.0]
        rule = group_split_conformal(ds, groups, 0.5)
        assert rule.group_q == (2.0, 5.0)
        # a record in both groups gets the larger threshold
        assert rule.thresholds(np.array([[0.0]]))[0] == 5.0

    def test_explicit_two_and_five(self):
        X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        ds = regression_dataset(X, np.zeros(3), [2.0, 1.0, 5.0])
        groups = [Equals(0, 0.0), Equals(1, 1.0)]
        rule = group_split_conformal(ds, groups, 0.4)
        assert rule.group_q == (2.0, 5.0)
        assert rule.thresholds(np.array([[0.0, 1.0]]))[0] == 5.0

    def test_single_group_is_marginal(self, rng):
        ds = self._data(rng)
        rule = group_split_conformal(ds, [lambda Z: np.ones(len(Z), bool)], 0.1)
        np.testing.assert_array_equal(rule.thresholds(ds.X), marginal_rule(ds, 0.1).thresholds(ds.X))

    def test_record_in_no_group(self, rng):
        ds = self._data(rng)
        with pytest.raises(ValueError, match="no group"):
            group_split_conformal(ds, [Equals(0, 0.0)], 0.1)

    def test_overlap_rejected_under_partition(self, rng):
        ds = self._data(rng)
        with pytest.raises(ValueError, match="several groups"):
            group_split_conformal(ds, [Equals(0, 0.0), Equals(0, 1.0), Equals(1, 1.0)], 0.1,
                                  combine="require-partition")

    def test_unknown_policy(self, rng):
        with pytest.raises(ValueError):
            group_split_conformal(self._data(rng), [Equals(0, 0.0)], 0.1, combine="min")

    def test_per_group_calibration_coverage(self, rng):
        ds = self._data(rng, 400)
        groups = [Equals(j, v) for j in range(2) for v in (0.0, 1.0)]
        alpha = 0.1
        rule = group_split_conformal(ds, groups, alpha)
        cov = rule.covered(ds)
        for g in groups:
            m = g.evaluate(ds.X) > 0
            assert cov[m].mean() >= 1 - alpha - 1 / (m.sum() + 1)
