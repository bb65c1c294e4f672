"""Coverage and length metrics for calibrated rules.

Any object with ``family``, ``alpha``, ``thresholds(X)`` and a ``provenance``
dict can be evaluated, so CPL rules and split-conformal baselines produce
directly comparable reports.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset, ShiftBasis
from .scores import dataset_scores, exact_lengths

logger = logging.getLogger(__name__)

UNDEFINED = "undefined"


@dataclass(frozen=True)
class Predicate:
    """Named membership predicate ``fn(X) -> bool array``."""

    name: str
    fn: object

    @property
    def spec(self) -> str:
        return self.name

    def evaluate(self, X) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(X, dtype=float)), dtype=float)


def group_name(group, index: int) -> str:
    spec = getattr(group, "spec", None)
    if spec:
        return spec
    return getattr(group, "__name__", None) or f"group{index}"


def _group_mask(group, X) -> np.ndarray:
    if hasattr(group, "evaluate"):
        return np.asarray(group.evaluate(X)) > 0
    return np.asarray(group(X), dtype=bool)


def lower_quantile(values, q: float) -> float:
    """Lower empirical quantile: the ``ceil(q * n)``-th smallest value (at least the first)."""
    v = np.sort(np.asarray(values, dtype=float))
    k = max(int(math.ceil(q * v.shape[0] - 1e-12)), 1)
    return float(v[k - 1])


@dataclass
class GroupCoverage:
    coverage: object  # float, or UNDEFINED for an empty group
    count: int

    @property
    def defined(self) -> bool:
        return self.count > 0


@dataclass
class EvalReport:
    """Coverage, shift-gap and length summary of one rule on one dataset."""

    marginal_coverage: float
    per_group_coverage: dict
    shift_gap: np.ndarray
    avg_length: float
    length_quantiles: dict
    n: int
    alpha: float
    provenance: dict = field(default_factory=dict)
    dataset_id: Optional[str] = None

    def group_deviations(self) -> dict:
        """Per-group ``coverage - (1 - alpha)`` for non-empty groups."""
        return {g: c.coverage - (1.0 - self.alpha) for g, c in self.per_group_coverage.items() if c.defined}

    def worst_group_gap(self) -> float:
        dev = self.group_deviations()
        return max((abs(v) for v in dev.values()), default=0.0)


def evaluate_rule(rule, dataset: Dataset, basis: Optional[ShiftBasis] = None,
                  groups: Sequence = (), dataset_id: Optional[str] = None) -> EvalReport:
    """Evaluate ``rule`` on ``dataset``.

    Parameters
    ----------
    rule : PredictionRule or QuantileRule
        Anything exposing ``family``, ``alpha`` and ``thresholds``.
    dataset : Dataset
        Payloads must match ``rule.family`` (a ``ValueError`` otherwise).
    basis : ShiftBasis, optional
        Directions of the exact coverage gap; defaults to the rule's basis or
        an intercept.
    groups : sequence
        Membership predicates (basis elements or callables on ``X``).

    Returns
    -------
    EvalReport
        Record weights, when the dataset carries them, weight every average.
        Empty groups are reported with count 0 and coverage ``"undefined"``.
    """
    family = rule.family
    S = dataset_scores(family, dataset)
    X = dataset.X
    h = np.asarray(rule.thresholds(X), dtype=float)
    hit = S <= h
    if basis is None:
        basis = getattr(rule, "basis", None) or ShiftBasis.parse("intercept")
    Phi = basis.matrix(X)
    if dataset.weights is None:
        # integer counts over n keep coverage and the intercept gap exact
        w = np.ones(dataset.n)
        total = float(dataset.n)
    else:
        w = dataset.weights
        total = float(w.sum())
    marginal = float(np.dot(w, hit)) / total
    shift_gap = (Phi.T @ (w * hit)) / total - (1.0 - rule.alpha) * ((Phi.T @ w) / total)

    per_group = {}
    for j, g in enumerate(groups):
        m = _group_mask(g, X)
        cnt = int(m.sum())
        if cnt == 0:
            per_group[group_name(g, j)] = GroupCoverage(UNDEFINED, 0)
        else:
            wg = w[m]
            per_group[group_name(g, j)] = GroupCoverage(float(np.dot(wg, hit[m]) / wg.sum()), cnt)

    lengths = exact_lengths(family, dataset, h)
    quant = {f"p{int(q * 100)}": lower_quantile(lengths, q) for q in (0.1, 0.5, 0.9)}
    return EvalReport(
        marginal_coverage=marginal,
        per_group_coverage=per_group,
        shift_gap=shift_gap,
        avg_length=float(np.dot(w, lengths)) / total,
        length_quantiles=quant,
        n=dataset.n,
        alpha=float(rule.alpha),
        provenance=dict(getattr(rule, "provenance", {}) or {}),
        dataset_id=dataset_id,
    )


@dataclass
class Comparison:
    marginal_delta: float
    length_ratio: float
    group_deltas: dict
    worst_gap_a: float
    worst_gap_b: float
    provenance_match: bool


def compare_reports(a: EvalReport, b: EvalReport) -> Comparison:
    """Coverage deltas ``a - b``, length ratio ``a / b`` and worst per-group gaps.

    Reports evaluated on different datasets are still compared, with a
    logged warning.
    """
    same = a.dataset_id == b.dataset_id and a.n == b.n
    if not same:
        logger.warning("comparing reports from different datasets (%s, n=%d) vs (%s, n=%d)",
                       a.dataset_id, a.n, b.dataset_id, b.n)
    deltas = {}
    for g, ca in a.per_group_coverage.items():
        cb = b.per_group_coverage.get(g)
        if cb is not None and ca.defined and cb.defined:
            deltas[g] = ca.coverage - cb.coverage
    ratio = a.avg_length / b.avg_length if b.avg_length > 0 else (1.0 if a.avg_length == 0 else math.inf)
    return Comparison(
        marginal_delta=a.marginal_coverage - b.marginal_coverage,
        length_ratio=ratio,
        group_deltas=deltas,
        worst_gap_a=a.worst_group_gap(),
        worst_gap_b=b.worst_group_gap(),
        provenance_match=same,
    )
