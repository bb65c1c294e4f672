"""Synthetic benchmarks and numeric length-optimal oracles.

Random streams come from numpy's counter-based Philox generator keyed by
``(seed, stream)``, so every stream (features, noise, coefficients) is
reproducible independently of the others.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.stats import norm

from .data import Dataset, Equals

STREAM_FEATURES = 0
STREAM_NOISE = 1
STREAM_THETA = 2
STREAM_INSTANCE = 3


def stream(seed: int, key: int) -> np.random.Generator:
    """Independent Philox stream for ``(seed, key)``."""
    return np.random.Generator(np.random.Philox(key=[int(seed) % 2**64, int(key)]))


# ---------------------------------------------------------------- toy example

@dataclass(frozen=True)
class ToySpec:
    n: int
    seed: int = 0
    alpha: float = 0.1
    variance_neg: float = 2.0
    variance_pos: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


def gen_toy(spec: ToySpec) -> Dataset:
    """``X ~ U[-1, 1]``, ``Y = X + N(0, v(X))`` with ``v = variance_neg`` for x<0.

    Payload is the conditional mean ``mu(x) = x`` (absolute-residual score).
    """
    x = stream(spec.seed, STREAM_FEATURES).uniform(-1.0, 1.0, spec.n)
    eps = stream(spec.seed, STREAM_NOISE).standard_normal(spec.n)
    sd = np.where(x < 0, math.sqrt(spec.variance_neg), math.sqrt(spec.variance_pos))
    y = x + sd * eps
    return Dataset.from_arrays(x[:, None], x[:, None], y, task="regression", payload_kind="abs_residual")


def folded_cdf(q, variance):
    """CDF of ``|N(0, variance)|``."""
    q = np.maximum(np.asarray(q, dtype=float), 0.0)
    return 2.0 * norm.cdf(q / np.sqrt(variance)) - 1.0


def folded_pdf(q, variance):
    sd = np.sqrt(variance)
    return np.where(np.asarray(q) >= 0, 2.0 * norm.pdf(np.asarray(q) / sd) / sd, 0.0)


def folded_ppf(level, variance):
    return np.sqrt(variance) * norm.ppf(0.5 * (1.0 + np.asarray(level, dtype=float)))


@dataclass(frozen=True)
class ToyOracle:
    q_minus: float
    q_plus: float
    length: float
    split_conformal_length: float
    conditional_length: float
    q_plus_min: float
    coverage_residual: float
    density_residual: float


def toy_oracle(alpha: float, variance_neg: float = 2.0, variance_pos: float = 1.0, tol: float = 1e-10) -> ToyOracle:
    """Length-optimal marginally valid thresholds for the two-halves toy problem.

    Solves ``0.5 F_-(q_-) + 0.5 F_+(q_+) = 1 - alpha`` together with equal
    conditional score densities at ``(q_-, q_+)``. Average length is
    ``q_- + q_+`` because each half has probability one half and the set is
    ``[mu - q, mu + q]``.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    target = 1.0 - alpha
    lo_level = max(2.0 * target - 1.0, 0.0)
    q_plus_min = float(folded_ppf(lo_level, variance_pos))
    q_minus_min = float(folded_ppf(lo_level, variance_neg))

    def q_minus_of(qp):
        need = 2.0 * target - folded_cdf(qp, variance_pos)
        if need >= 1.0:
            return math.inf
        return float(folded_ppf(max(need, 0.0), variance_neg))

    def density_gap(qp):
        qm = q_minus_of(qp)
        pm = 0.0 if not math.isfinite(qm) else float(folded_pdf(qm, variance_neg))
        return pm - float(folded_pdf(qp, variance_pos))

    if variance_neg == variance_pos:
        qp = qm = float(folded_ppf(target, variance_pos))
    else:
        hi = max(q_plus_min, 1.0)
        while density_gap(hi) <= 0 or not math.isfinite(q_minus_of(hi)):
            hi *= 2.0
            if hi > 1e6:
                raise RuntimeError("toy oracle: failed to bracket the equal-density root")
        lo = q_plus_min * (1 + 1e-15) + 1e-300
        if density_gap(lo) >= 0:
            lo = q_plus_min
        qp = optimize.brentq(density_gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        qm = q_minus_of(qp)
    cov_res = 0.5 * float(folded_cdf(qm, variance_neg)) + 0.5 * float(folded_cdf(qp, variance_pos)) - target
    dens_res = float(folded_pdf(qm, variance_neg) - folded_pdf(qp, variance_pos))
    if abs(cov_res) > tol or abs(dens_res) > tol:
        raise RuntimeError(f"toy oracle did not converge (residuals {cov_res:.2e}, {dens_res:.2e})")
    q_sc = optimize.brentq(lambda q: 0.5 * folded_cdf(q, variance_neg) + 0.5 * folded_cdf(q, variance_pos) - target,
                           0.0, 100.0 * math.sqrt(max(variance_neg, variance_pos)), xtol=1e-14)
    cond = float(folded_ppf(target, variance_neg) + folded_ppf(target, variance_pos))
    return ToyOracle(float(qm), float(qp), float(qm + qp), 2.0 * float(q_sc), cond,
                     max(q_plus_min, 0.0), cov_res, dens_res)


# ------------------------------------------------------- group benchmark

@dataclass(frozen=True)
class GroupSynthSpec:
    n_train: int
    n_cal: int
    n_test: int
    seed: int = 0
    v_min: float = 1.0
    n_binary: int = 10
    n_gauss: int = 90

    def __post_init__(self):
        if min(self.n_train, self.n_cal, self.n_test) < 1:
            raise ValueError("split sizes must be positive")
        if not self.v_min > 0:
            raise ValueError("v_min must be positive")


def group_noise_variance(binary, gauss_sum_nonneg, v_min: float = 1.0):
    """``max(1 + sum_i i * b_i + 40 * 1[sum >= 0] - 20, v_min)`` with 1-based ``i``."""
    binary = np.atleast_2d(binary)
    weights = np.arange(1, binary.shape[1] + 1)
    raw = 1.0 + binary @ weights + 40.0 * np.asarray(gauss_sum_nonneg, dtype=float) - 20.0
    return np.maximum(raw, v_min)


def group_definitions(n_binary: int = 10) -> list:
    """Groups ``2i-1 = {x_i = 0}``, ``2i = {x_i = 1}`` as basis elements."""
    out = []
    for i in range(n_binary):
        out += [Equals(i, 0.0), Equals(i, 1.0)]
    return out


def gen_group_synth(spec: GroupSynthSpec):
    """Heteroscedastic linear regression with 20 overlapping binary groups.

    Returns ``(train, cal, test, groups)``. A least-squares fit on the train
    split supplies the point predictions used as absolute-residual payloads.
    """
    n = spec.n_train + spec.n_cal + spec.n_test
    p = spec.n_binary + spec.n_gauss
    feats = stream(spec.seed, STREAM_FEATURES)
    binary = feats.integers(0, 2, size=(n, spec.n_binary)).astype(float)
    gauss = feats.standard_normal((n, spec.n_gauss))
    X = np.hstack([binary, gauss])
    theta = stream(spec.seed, STREAM_THETA).standard_normal(p)
    var = group_noise_variance(binary, gauss.sum(axis=1) >= 0, spec.v_min)
    y = X @ theta + np.sqrt(var) * stream(spec.seed, STREAM_NOISE).standard_normal(n)

    tr = slice(0, spec.n_train)
    A = np.hstack([X[tr], np.ones((spec.n_train, 1))])
    coef, *_ = np.linalg.lstsq(A, y[tr], rcond=None)
    mu = X @ coef[:-1] + coef[-1]

    def split(sl):
        return Dataset.from_arrays(X[sl], mu[sl, None], y[sl], task="regression", payload_kind="abs_residual")

    a, b = spec.n_train, spec.n_train + spec.n_cal
    return split(slice(0, a)), split(slice(a, b)), split(slice(b, n)), group_definitions(spec.n_binary)


def fit_scale_model(train: Dataset):
    """Least-squares model of the absolute residual on the train split.

    Returns ``(coef, cut)``: the linear coefficients (intercept last) and the
    train median of the fitted scale, so ``X @ coef[:-1] + coef[-1] >= cut``
    flags the likely high-noise half.
    """
    A = np.hstack([train.X, np.ones((train.n, 1))])
    r = np.abs(train.labels - train.payload[:, 0])
    coef, *_ = np.linalg.lstsq(A, r, rcond=None)
    cut = float(np.median(A @ coef))
    return coef, cut


def with_scale_feature(ds: Dataset, coef) -> Dataset:
    """Append the fitted residual scale as one extra feature column."""
    return ds.with_columns(ds.X @ coef[:-1] + coef[-1])


# ------------------------------------------------------- level-set oracle

@dataclass(frozen=True)
class Cell:
    """A covariate cell with folded-normal scores of the given variance."""

    prob: float
    variance: float
    groups: int = 0  # membership bitmask


@dataclass(frozen=True)
class LevelSetSolution:
    beta: np.ndarray
    thresholds: np.ndarray
    length: float
    residual: np.ndarray
    iterations: int


def cells_basis(cells: Sequence[Cell], n_groups: int, intercept: bool = False) -> np.ndarray:
    """Basis matrix over cells from their group bitmasks."""
    cols = [[1.0] * len(cells)] if intercept else []
    for g in range(n_groups):
        cols.append([float((c.groups >> g) & 1) for c in cells])
    return np.array(cols, dtype=float).T


def _cell_thresholds(f, var):
    # boundary where f * p(y|x) = 1 with p the Gaussian label density: t = sd * sqrt(2 log(f / (sqrt(2 pi) sd)))
    sd = np.sqrt(var)
    ratio = np.where(f > 0, f / (math.sqrt(2 * math.pi) * sd), 0.0)
    arg = np.where(ratio > 1.0, 2.0 * np.log(np.maximum(ratio, 1.0)), 0.0)
    return sd * np.sqrt(arg)


def _cell_coverage(t, var):
    return 2.0 * norm.cdf(t / np.sqrt(var)) - 1.0


def level_set_oracle(cells: Sequence[Cell], Phi, alpha: float, tol: float = 1e-8,
                     max_iter: int = 200) -> LevelSetSolution:
    """Optimal level-set rule ``{y : f_beta(x) p(y|x) >= 1}`` for Gaussian cells.

    ``p(y|x)`` is the Gaussian label density around the cell's mean, so the
    set is an interval of half-width ``t(cell)`` found by inverting the
    density on its decreasing branch. ``beta`` is found by damped Newton on
    the coverage equations ``sum_c P_c phi_j(c) (cov_c - (1 - alpha)) = 0``.
    """
    P = np.array([c.prob for c in cells], dtype=float)
    P = P / P.sum()
    var = np.array([c.variance for c in cells], dtype=float)
    Phi = np.asarray(Phi, dtype=float)
    if Phi.shape[0] != len(cells):
        raise ValueError("basis rows must match cells")
    target = 1.0 - alpha

    def residual(beta):
        f = Phi @ beta
        t = _cell_thresholds(f, var)
        return Phi.T @ (P * (_cell_coverage(t, var) - target)), f, t

    # start from the constant f giving marginal coverage
    def marg(c):
        return float(P @ _cell_coverage(_cell_thresholds(np.full(len(P), c), var), var)) - target

    c_lo = math.sqrt(2 * math.pi * var.min()) * 1.0000001
    c_hi = c_lo * 2
    while marg(c_hi) < 0:
        c_hi *= 2
    c0 = optimize.brentq(marg, c_lo, c_hi, xtol=1e-14)
    beta, *_ = np.linalg.lstsq(Phi, np.full(len(P), c0), rcond=None)

    res, f, t = residual(beta)
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(res)) < tol:
            break
        tt = np.maximum(t, 1e-300)
        dcov_df = np.where(t > 0, 2.0 * var / (np.maximum(f, 1e-300) ** 2 * tt), 0.0)
        J = Phi.T @ (Phi * (P * dcov_df)[:, None])
        step, *_ = np.linalg.lstsq(J, res, rcond=None)
        lam = 1.0
        norm0 = np.linalg.norm(res)
        while lam > 1e-8:
            cand = beta - lam * step
            r2, f2, t2 = residual(cand)
            if np.all(np.isfinite(r2)) and np.linalg.norm(r2) < norm0:
                beta, res, f, t = cand, r2, f2, t2
                break
            lam *= 0.5
        else:
            raise RuntimeError("level-set oracle: Newton line search failed")
    if np.max(np.abs(res)) >= tol:
        raise RuntimeError(f"level-set oracle did not converge (max residual {np.max(np.abs(res)):.2e})")
    return LevelSetSolution(beta, t, float(2.0 * P @ t), res, it)


def group_synth_cells(n_binary: int = 10, v_min: float = 1.0) -> list:
    """Cells of the group benchmark: binary pattern x sign of the Gaussian sum.

    Group ``2i`` (0-based) is ``x_i = 0`` and ``2i + 1`` is ``x_i = 1``.
    """
    cells = []
    p = 0.5 ** n_binary * 0.5
    for pattern in itertools.product((0, 1), repeat=n_binary):
        b = np.array(pattern, dtype=float)
        mask = 0
        for i, bit in enumerate(pattern):
            mask |= 1 << (2 * i + bit)
        for ind in (0, 1):
            cells.append(Cell(p, float(group_noise_variance(b, ind, v_min)[0]), mask))
    return cells


# ---------------------------------------------------- discrete instances

class InfeasibleInstanceError(ValueError):
    """No threshold assignment meets the coverage constraints exactly."""


@dataclass(frozen=True)
class DiscreteInstance:
    """Finite covariate/label problem with exact probabilities.

    ``scores[x, y]`` is the conformity score of label ``y`` at point ``x``;
    ``Phi[x]`` the shift basis at ``x``.
    """

    px: np.ndarray
    py_x: np.ndarray
    scores: np.ndarray
    Phi: np.ndarray
    alpha: float

    def __post_init__(self):
        for name in ("px", "py_x", "scores", "Phi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        m, K = self.py_x.shape
        if not (m <= 6 and K <= 8):
            raise ValueError("instance too large for brute force (m <= 6, K <= 8)")
        if not np.isclose(self.px.sum(), 1.0) or not np.allclose(self.py_x.sum(axis=1), 1.0):
            raise ValueError("probabilities must be normalised")
        if self.scores.shape != (m, K) or self.Phi.shape[0] != m:
            raise ValueError("inconsistent instance shapes")

    @property
    def m(self):
        return self.py_x.shape[0]

    @property
    def K(self):
        return self.py_x.shape[1]

    def coverage_gap(self, thresholds) -> np.ndarray:
        cov = np.sum(self.py_x * (self.scores <= np.asarray(thresholds)[:, None]), axis=1)
        return self.Phi.T @ (self.px * (cov - (1.0 - self.alpha)))

    def expected_length(self, thresholds) -> float:
        return float(self.px @ np.sum(self.scores <= np.asarray(thresholds)[:, None], axis=1))

    def to_dataset(self) -> Dataset:
        """Weighted dataset: one record per ``(x, y)`` with mass ``P(x) p(y|x)``.

        Features are the one-hot encoding of ``x`` followed by the basis values.
        """
        m, K = self.py_x.shape
        rows, pay, lab, w = [], [], [], []
        for i in range(m):
            for y in range(K):
                rows.append(np.concatenate([np.eye(m)[i], self.Phi[i]]))
                pay.append(self.scores[i])
                lab.append(y)
                w.append(self.px[i] * self.py_x[i, y])
        return Dataset.from_arrays(np.array(rows), np.array(pay), np.array(lab), task="classification",
                                   payload_kind="classification", K=K, weights=np.array(w))


@dataclass(frozen=True)
class DiscreteSolution:
    length: float
    thresholds: np.ndarray
    feasible_lengths: tuple


def brute_force_discrete_oracle(instance: DiscreteInstance, tol: float = 1e-9) -> DiscreteSolution:
    """Exhaustive search over per-point score cuts for the shortest valid rule.

    Candidate cuts at each point are ``-inf`` and its distinct scores. Raises
    :class:`InfeasibleInstanceError` when no assignment has every basis
    coverage gap within ``tol``.
    """
    cands = [np.concatenate([[-np.inf], np.unique(instance.scores[i])]) for i in range(instance.m)]
    best, best_t, feas = math.inf, None, []
    for combo in itertools.product(*cands):
        t = np.array(combo)
        if np.max(np.abs(instance.coverage_gap(t))) <= tol:
            L = instance.expected_length(t)
            feas.append(L)
            if L < best - 1e-15:
                best, best_t = L, t
    if best_t is None:
        raise InfeasibleInstanceError("no threshold assignment satisfies the coverage constraints")
    return DiscreteSolution(best, best_t, tuple(feas))


def gen_discrete_instance(seed: int, m: int = 3, K: int = 5, d: int = 2, alpha: Optional[float] = None,
                          min_gap: float = 0.03, max_tries: int = 10_000) -> DiscreteInstance:
    """Random feasible instance whose optimum is a deterministic level set.

    A positive shift ``f = Phi @ beta`` is drawn first; at every point the
    labels above the level ``1/f`` carry total mass ``1 - alpha`` and those
    below carry ``alpha``, separated from the level by at least ``min_gap``.
    Scores are ``1 - p(y|x)`` so thresholding them reproduces the level set.
    The basis has an intercept plus ``d - 1`` random group indicators, drawn
    until the ``d`` columns are linearly independent.
    """
    if d > m:
        raise ValueError("need d <= m for linearly independent basis columns")
    rng = stream(seed, STREAM_INSTANCE)
    for _ in range(max_tries):
        a = float(rng.uniform(0.1, 0.3)) if alpha is None else float(alpha)
        Phi = np.ones((m, 1))
        for _g in range(d - 1):
            col = rng.integers(0, 2, size=m).astype(float)
            Phi = np.hstack([Phi, col[:, None]])
        if np.linalg.matrix_rank(Phi) < d:
            continue
        px = rng.uniform(0.5, 1.5, size=m)
        px /= px.sum()
        beta = rng.uniform(1.5, 6.0, size=d) / d
        f = Phi @ beta
        u = 1.0 / f
        py = np.zeros((m, K))
        ok = True
        for i in range(m):
            # covered labels share 1 - alpha above the level, the rest share alpha below it
            ks = [k for k in range(1, K)
                  if (1 - a) / k > u[i] + 2 * min_gap and a / (K - k) < u[i] - 2 * min_gap]
            if not ks:
                ok = False
                break
            k = int(rng.choice(ks))
            cov = (1 - a) * rng.dirichlet(np.full(k, 10.0))
            unc = a * rng.dirichlet(np.full(K - k, 10.0))
            if np.min(cov) - u[i] < min_gap or u[i] - np.max(unc) < min_gap or np.min(unc) <= 0:
                ok = False
                break
            probs = np.concatenate([cov, unc])
            py[i] = probs[rng.permutation(K)]
        if not ok:
            continue
        scores = 1.0 - py
        if any(len(np.unique(scores[i])) < K for i in range(m)):
            continue
        return DiscreteInstance(px, py, scores, Phi, a)
    raise RuntimeError("could not generate a feasible discrete instance")
