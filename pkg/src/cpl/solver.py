"""Smoothed length-optimisation objective and its descent-ascent solver.

The learner maximises over threshold parameters ``theta`` and minimises over
shift coefficients ``beta`` the smoothed empirical objective

    g(beta, theta) = sum_i w_i * [ f_beta(x_i) * (I(S_i, h_theta(x_i)) - (1 - alpha))
                                   - len_i(h_theta(x_i)) ]

with ``f_beta = Phi @ beta``. Its ``beta``-gradient is the smoothed coverage
gap in each basis direction, so stationarity in ``beta`` is conditional
coverage over the shift class.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels
from ._accel import use_numba
from .data import Dataset, ShiftBasis, ShiftCoefficients, SolverConfig, validate_dataset
from .hypothesis import Hypothesis
from .scores import Classification, ScoreFamily, dataset_scores
from .smoothing import SmoothingKernel

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
SIGMA_FLOOR = 1e-4


class CPLDivergenceError(RuntimeError):
    """Raised when the objective or a gradient becomes non-finite or explodes."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class SolverState:
    beta: ShiftCoefficients
    hyp: Hypothesis
    kernel: SmoothingKernel
    alpha: float
    outer_iter: int = 0
    h_steps: int = 0
    beta_steps: int = 0
    grad_h_norm: float = math.nan
    grad_beta_norm: float = math.nan
    gap: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class PredictionRule:
    """Calibrated rule ``C(x) = {y : S(x, y) <= h(x)}``."""

    family: ScoreFamily
    hyp: Hypothesis
    alpha: float
    basis: ShiftBasis
    beta: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def thresholds(self, X) -> np.ndarray:
        return self.hyp.evaluate(X)

    def covered(self, dataset: Dataset) -> np.ndarray:
        return dataset_scores(self.family, dataset) <= self.thresholds(dataset.X)


@dataclass
class SolverDiagnostics:
    converged: bool = False
    iterations: int = 0
    best_iter: int = -1
    sigma: float = math.nan
    objective_trace: list = field(default_factory=list)
    gap_trace: list = field(default_factory=list)
    final_gap: Optional[np.ndarray] = None
    grad_h_norm: float = math.nan
    grad_beta_norm: float = math.nan
    beta: Optional[np.ndarray] = None
    deterministic: bool = True
    message: str = ""


class _Problem:
    """Arrays precomputed once per (dataset, basis, family, feature map)."""

    def __init__(self, dataset: Dataset, basis: ShiftBasis, family: ScoreFamily, hyp: Hypothesis):
        family.check_dataset(dataset)
        self.family = family
        self.S = np.ascontiguousarray(dataset_scores(family, dataset))
        self.classification = isinstance(family, Classification)
        if self.classification:
            self.C = np.ascontiguousarray(dataset.payload)
        else:
            self.off = np.ascontiguousarray(family.half_offset(dataset.payload))
        self.Phi = basis.matrix(dataset.X)
        self.Z = hyp.features(dataset.X)
        self.w = np.ascontiguousarray(dataset.normalized_weights)
        self.n = dataset.n

    def take(self, idx) -> "_Problem":
        sub = object.__new__(_Problem)
        sub.__dict__.update(self.__dict__)
        sub.S, sub.Phi, sub.Z = self.S[idx], self.Phi[idx], self.Z[idx]
        if self.classification:
            sub.C = self.C[idx]
        else:
            sub.off = self.off[idx]
        w = self.w[idx]
        sub.w = w / w.sum()
        sub.n = len(idx)
        return sub

    def evaluate(self, beta, hyp: Hypothesis, sigma: float, alpha: float):
        """Objective, beta-gradient (smoothed gap) and theta-gradient."""
        h, state = hyp.forward(self.Z)
        f = self.Phi @ beta
        target = 1.0 - alpha
        if self.classification:
            obj, r, gh = kernels.classification_pass(self.S, self.C, h, f, self.w, target, sigma)
        else:
            obj, r, gh = kernels.regression_pass(self.S, self.off, h, f, self.w, target, sigma)
        gbeta = self.Phi.T @ r
        gtheta = hyp.backward(self.Z, state, gh)
        return obj, gbeta, gtheta


def _problem(state: SolverState, dataset, basis, family) -> _Problem:
    return _Problem(dataset, basis, family, state.hyp)


def smoothed_objective(state: SolverState, dataset: Dataset, basis: ShiftBasis, family: ScoreFamily) -> float:
    pb = _problem(state, dataset, basis, family)
    return pb.evaluate(state.beta.beta, state.hyp, state.kernel.sigma, state.alpha)[0]


def grad_beta(state: SolverState, dataset: Dataset, basis: ShiftBasis, family: ScoreFamily) -> np.ndarray:
    """Smoothed coverage gap ``sum_i w_i phi(x_i) (I_i - (1 - alpha))``."""
    pb = _problem(state, dataset, basis, family)
    return pb.evaluate(state.beta.beta, state.hyp, state.kernel.sigma, state.alpha)[1]


def grad_h_params(state: SolverState, dataset: Dataset, basis: ShiftBasis, family: ScoreFamily) -> np.ndarray:
    pb = _problem(state, dataset, basis, family)
    return pb.evaluate(state.beta.beta, state.hyp, state.kernel.sigma, state.alpha)[2]


def coverage_gap(rule: PredictionRule, dataset: Dataset, basis: Optional[ShiftBasis] = None) -> np.ndarray:
    """Exact (unsmoothed) coverage gap in every basis direction."""
    basis = rule.basis if basis is None else basis
    hit = rule.covered(dataset).astype(float)
    Phi = basis.matrix(dataset.X)
    return Phi.T @ (dataset.normalized_weights * (hit - (1.0 - rule.alpha)))


# ------------------------------------------------------------------ helpers

def split_conformal_level(scores, alpha, weights=None) -> float:
    """Finite split-conformal threshold, falling back to the max score."""
    from .baselines import split_conformal, weighted_split_conformal

    if weights is None:
        q = split_conformal(scores, alpha)
    else:
        q = weighted_split_conformal(scores, weights, alpha)
    return float(np.max(scores)) if not np.isfinite(q) else float(q)


def auto_sigma(scores, scale: float = 1.0) -> float:
    scores = np.asarray(scores, dtype=float)
    n = scores.shape[0]
    s_hat = float(np.std(scores, ddof=1)) if n > 1 else 0.0
    return max(scale * s_hat / math.sqrt(n), SIGMA_FLOOR)


def resolve_sigma(config: SolverConfig, scores) -> float:
    if config.sigma == "auto":
        return auto_sigma(scores, config.sigma_scale)
    return float(config.sigma)


def _histogram_density(values, weights, at, bins=32) -> float:
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        return 0.0
    dens, edges = np.histogram(values, bins=bins, range=(lo, hi), weights=weights, density=False)
    width = edges[1] - edges[0]
    k = int(np.clip(np.searchsorted(edges, at, side="right") - 1, 0, bins - 1))
    return float(dens[k] / (np.sum(weights) * width))


def initial_beta(dataset: Dataset, basis: ShiftBasis, family: ScoreFamily, alpha: float) -> np.ndarray:
    """Near-stationary start: ``f_beta`` ~ constant length-density / score-density ratio.

    At the split-conformal level ``q`` the inner player is stationary when
    ``f * p_S(q) = d len / d h``; the constant solving that (with histogram
    density estimates) is projected onto the span of the basis.
    """
    S = dataset_scores(family, dataset)
    w = dataset.normalized_weights
    q = split_conformal_level(S, alpha, None if dataset.weights is None else w)
    p_hat = _histogram_density(S, w, q)
    if isinstance(family, Classification):
        C = dataset.payload
        num = _histogram_density(C.ravel(), np.repeat(w, C.shape[1]), q) * C.shape[1]
        num = num if num > 0 else 1.0
    else:
        num = 2.0
    if p_hat <= 0:
        spread = float(np.ptp(S)) or 1.0
        p_hat = 1.0 / spread
    f0 = num / p_hat
    Phi = basis.matrix(dataset.X)
    beta, *_ = np.linalg.lstsq(Phi, np.full(dataset.n, f0), rcond=None)
    return beta


def _config_hash(config: SolverConfig) -> str:
    blob = json.dumps(asdict(config), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _sigma_schedule(config: SolverConfig, sigma: float):
    if config.sigma_start is None or config.sigma_start <= sigma:
        return lambda it: sigma, 0
    n_anneal = max(1, int(round(config.anneal_frac * config.max_outer_iters)))
    ratio = math.log(sigma / config.sigma_start)

    def sched(it):
        if it >= n_anneal:
            return sigma
        return config.sigma_start * math.exp(ratio * it / n_anneal)

    return sched, n_anneal


def run_cpl(config: SolverConfig, dataset: Dataset, basis: ShiftBasis, family: ScoreFamily,
            hyp0: Hypothesis, beta0=None):
    """Alternating gradient ascent on the threshold map and descent on ``beta``.

    Each outer iteration takes ``inner_steps_h`` ascent steps on the
    hypothesis parameters followed by ``inner_steps_beta`` descent steps on
    ``beta``. Returns ``(rule, diagnostics)``. The run counts as converged
    once the largest smoothed coverage gap is within ``tol_gap`` and the
    threshold-gradient norm within ``tol_grad``; otherwise the iterate with
    the smallest gap is returned.

    Raises :class:`CPLDivergenceError` on non-finite or exploding values.
    """
    report = validate_dataset(dataset)
    if not report.ok:
        raise ValueError("invalid dataset: " + "; ".join(map(str, report.violations[:5])))
    if config.squash_gamma is not None and hyp0.squash != config.squash_gamma:
        raise ValueError("hypothesis squash does not match config.squash_gamma")
    basis = basis.bind(dataset.X)
    full = _Problem(dataset, basis, family, hyp0)
    alpha = config.alpha
    sigma = resolve_sigma(config, full.S)
    sched, n_anneal = _sigma_schedule(config, sigma)

    beta = initial_beta(dataset, basis, family, alpha) if beta0 is None else np.array(beta0, dtype=float)
    if beta.shape != (basis.d,):
        raise ValueError(f"beta0 has shape {beta.shape}, expected ({basis.d},)")
    hyp = hyp0
    theta = hyp0.params.copy()

    rng = np.random.default_rng(config.seed)
    batch = config.batch_size if config.batch_size and config.batch_size < full.n else None
    order, cursor = None, 0

    def problem_for_step():
        nonlocal order, cursor
        if batch is None:
            return full
        if order is None or cursor + batch > full.n:
            order, cursor = rng.permutation(full.n), 0
        idx = np.sort(order[cursor:cursor + batch])
        cursor += batch
        return full.take(idx)

    diag = SolverDiagnostics(sigma=sigma)
    best = None

    def check(obj, *arrays):
        bad = not math.isfinite(obj) or abs(obj) > DIVERGENCE_LIMIT
        bad = bad or any(not np.all(np.isfinite(a)) for a in arrays)
        if bad:
            diag.message = "non-finite or exploding objective; step sizes too large?"
            diag.beta = beta.copy()
            raise CPLDivergenceError(diag.message, diag)

    it = 0
    for it in range(config.max_outer_iters):
        s_it = sched(it)
        pb = problem_for_step()
        for _ in range(config.inner_steps_h):
            obj, gb, gt = pb.evaluate(beta, hyp, s_it, alpha)
            check(obj, gb, gt)
            theta = theta + config.step_h * gt
            hyp = hyp.with_params(theta)
        obj, gb, gt = pb.evaluate(beta, hyp, s_it, alpha)
        check(obj, gb, gt)
        # gb depends on theta only, so repeated beta steps share it
        for _ in range(config.inner_steps_beta):
            beta = beta - config.step_beta * gb

        obj, gb, gt = full.evaluate(beta, hyp, s_it, alpha) if batch else pb.evaluate(beta, hyp, s_it, alpha)
        check(obj, gb, gt)
        gap_max = float(np.max(np.abs(gb)))
        gnorm = float(np.linalg.norm(gt))
        diag.objective_trace.append(obj)
        diag.gap_trace.append(gap_max)
        diag.grad_h_norm, diag.grad_beta_norm = gnorm, float(np.linalg.norm(gb))
        diag.final_gap = gb
        if it >= n_anneal - 1 and (best is None or gap_max < best[0]):
            best = (gap_max, theta.copy(), beta.copy(), it, gb, gnorm)
        if it >= n_anneal - 1 and gap_max <= config.tol_gap and gnorm <= config.tol_grad:
            diag.converged = True
            break

    diag.iterations = it + 1
    if not diag.converged and best is not None:
        _, theta, beta, diag.best_iter, diag.final_gap, diag.grad_h_norm = best
        hyp = hyp.with_params(theta)
        diag.message = "not converged; returning the smallest-gap iterate"
        logger.warning("CPL did not converge in %d iterations (best max gap %.3g)", diag.iterations, best[0])
    else:
        diag.best_iter = it
    diag.beta = beta.copy()

    provenance = {
        "config_hash": _config_hash(config),
        "seed": int(config.seed),
        "iterations": diag.iterations,
        "converged": diag.converged,
        "sigma": sigma,
        "backend": "numba" if use_numba() else "numpy",
    }
    rule = PredictionRule(family, hyp, alpha, basis, beta.copy(), provenance)
    return rule, diag


def make_state(beta, hyp: Hypothesis, sigma: float, alpha: float) -> SolverState:
    return SolverState(ShiftCoefficients(beta), hyp, SmoothingKernel(sigma), alpha)
