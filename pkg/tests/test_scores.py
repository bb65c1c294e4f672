import math

import numpy as np
import pytest
from scipy import integrate

from cpl.data import CalibrationRecord
from cpl.scores import (CQR, AbsResidual, Classification, dataset_scores, exact_length, exact_lengths,
                        family_from_dict, score, smoothed_length, smoothed_length_dh)
from cpl.smoothing import SmoothingKernel, smoothed_indicator

from conftest import classification_dataset, regression_dataset


def rec(payload, label):
    return CalibrationRecord([0.0], payload, label)


def quad_length(score_fn, h, sigma, points):
    """Adaptive quadrature of the smoothed set length over the label axis."""
    k = SmoothingKernel(sigma)
    lo, hi = min(points) - 40 * sigma - 10, max(points) + 40 * sigma + 10
    val, _ = integrate.quad(lambda y: smoothed_indicator(score_fn(y), h, k), lo, hi, points=sorted(points),
                            limit=500, epsabs=1e-12, epsrel=1e-12)
    return val


class TestScore:
    def test_abs_residual(self):
        assert score(AbsResidual(), rec([2.0], 3.5)) == 1.5

    def test_cqr(self):
        assert score(CQR(), rec([0.0, 2.0], 3.0)) == 1.0

    def test_classification(self):
        assert score(Classification(3), rec([0.1, 0.7, 0.4], 1)) == 0.7

    def test_variant_mismatch(self):
        with pytest.raises(ValueError):
            score(CQR(), rec([1.0], 0.0))
        with pytest.raises(ValueError):
            dataset_scores(CQR(), regression_dataset([[0.0]], [1.0], [0.0]))

    def test_family_round_trip(self):
        for fam in (AbsResidual(), CQR(), Classification(4)):
            assert family_from_dict(fam.describe()) == fam


class TestExactLength:
    def test_abs_residual(self):
        assert exact_length(AbsResidual(), rec([0.0], 0.0), 1.5) == 3.0

    def test_cqr_base_interval(self):
        assert exact_length(CQR(), rec([0.0, 2.0], 0.0), 0.0) == 2.0

    def test_classification_count(self):
        assert exact_length(Classification(3), rec([0.1, 0.4, 0.9], 0), 0.5) == 2

    def test_empty_sets(self):
        assert exact_length(AbsResidual(), rec([0.0], 0.0), -0.1) == 0.0
        assert exact_length(CQR(), rec([0.0, 2.0], 0.0), -1.5) == 0.0
        assert exact_length(Classification(2), rec([0.3, 0.4], 0), -5.0) == 0

    def test_vectorised_matches_scalar(self, rng):
        ds = regression_dataset(np.zeros((30, 1)), np.column_stack([rng.normal(size=30) - 1, rng.normal(size=30) + 1]),
                                rng.normal(size=30), kind="cqr")
        h = rng.normal(size=30)
        ref = [exact_length(CQR(), r, hi) for r, hi in zip(ds.records, h)]
        np.testing.assert_allclose(exact_lengths(CQR(), ds, h), ref)


class TestSmoothedLength:
    def test_abs_residual_zero_threshold(self):
        sigma = 0.37
        assert smoothed_length(AbsResidual(), rec([0.0], 0.0), 0.0, SmoothingKernel(sigma)) == pytest.approx(
            2 * sigma / math.sqrt(2 * math.pi), rel=1e-14)

    def test_abs_residual_against_quadrature(self):
        ref = quad_length(abs, 1.0, 0.1, [-1.0, 0.0, 1.0])
        assert smoothed_length(AbsResidual(), rec([0.0], 0.0), 1.0, SmoothingKernel(0.1)) == pytest.approx(ref, abs=1e-8)

    def test_cqr_sharp_limit(self):
        assert abs(smoothed_length(CQR(), rec([0.0, 2.0], 0.0), 1.0, SmoothingKernel(1e-6)) - 4.0) < 1e-6

    def test_cqr_against_quadrature(self, rng):
        for _ in range(10):
            lo = float(rng.normal())
            w = float(rng.uniform(0, 3))
            h = float(rng.uniform(-1, 2))
            sigma = float(rng.uniform(0.05, 1.0))
            fn = lambda y: max(lo - y, y - (lo + w))
            ref = quad_length(fn, h, sigma, [lo - h, lo + w / 2, lo + w + h])
            got = smoothed_length(CQR(), rec([lo, lo + w], 0.0), h, SmoothingKernel(sigma))
            assert got == pytest.approx(ref, abs=1e-8)

    def test_classification_sum(self):
        k = SmoothingKernel(0.2)
        s = np.array([0.1, 0.5, 0.8])
        ref = sum(smoothed_indicator(v, 0.4, k) for v in s)
        assert smoothed_length(Classification(3), rec(s, 0), 0.4, k) == pytest.approx(ref)

    def test_monotone_in_threshold(self):
        k = SmoothingKernel(0.3)
        hs = np.linspace(-2, 3, 101)
        for fam, r in ((AbsResidual(), rec([0.0], 0.0)), (CQR(), rec([0.0, 1.0], 0.0)),
                       (Classification(3), rec([0.2, 0.6, 0.9], 0))):
            vals = [smoothed_length(fam, r, h, k) for h in hs]
            assert np.all(np.diff(vals) >= -1e-15)

    def test_error_bound_regression(self, rng):
        # per-record |smoothed - exact| is at most the two-tail L1 smoothing error
        for _ in range(200):
            sigma = float(10 ** rng.uniform(-3, 0))
            h = float(rng.normal())
            w = float(rng.uniform(0, 2))
            for fam, r in ((AbsResidual(), rec([0.0], 0.0)), (CQR(), rec([0.0, w], 0.0))):
                diff = abs(smoothed_length(fam, r, h, SmoothingKernel(sigma)) - exact_length(fam, r, h))
                assert diff <= 2 * math.sqrt(math.pi / 2) * sigma
                assert diff <= sigma * math.sqrt(2 / math.pi) + 1e-15

    def test_classification_within_zero_and_k(self, rng):
        k = SmoothingKernel(0.5)
        for h in rng.normal(scale=3, size=50):
            v = smoothed_length(Classification(4), rec(rng.uniform(size=4), 0), h, k)
            assert 0.0 <= v <= 4.0


class TestSmoothedLengthDerivative:
    def test_abs_residual_at_zero(self):
        assert smoothed_length_dh(AbsResidual(), rec([0.0], 0.0), 0.0, SmoothingKernel(0.5)) == 1.0

    def test_tail(self):
        assert smoothed_length_dh(AbsResidual(), rec([0.0], 0.0), -10 * 0.2, SmoothingKernel(0.2)) < 1e-20

    def test_finite_differences(self, rng):
        cases = [(AbsResidual(), lambda: rec([rng.normal()], 0.0)),
                 (CQR(), lambda: rec(np.sort(rng.normal(size=2)), 0.0)),
                 (Classification(5), lambda: rec(rng.uniform(size=5), 0))]
        for fam, make in cases:
            for _ in range(20):
                r = make()
                sigma = float(rng.uniform(0.05, 1.0))
                k = SmoothingKernel(sigma)
                h = float(rng.uniform(-0.5, 1.5))
                eps = 1e-6
                fd = (smoothed_length(fam, r, h + eps, k) - smoothed_length(fam, r, h - eps, k)) / (2 * eps)
                an = smoothed_length_dh(fam, r, h, k)
                assert an == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_dataset_scores_classification():
    ds = classification_dataset(np.zeros((2, 1)), [[0.1, 0.9], [0.3, 0.2]], [1, 0])
    np.testing.assert_array_equal(dataset_scores(Classification(2), ds), [0.9, 0.3])
