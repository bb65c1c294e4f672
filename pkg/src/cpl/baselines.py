"""Split-conformal baselines: marginal, group-wise (Mondrian) and weighted."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import Dataset
from .scores import ScoreFamily, dataset_scores, family_for

_EPS = 1e-9


def conformal_rank(n: int, alpha: float) -> int:
    """``ceil((n + 1) * (1 - alpha))``, robust to float round-off."""
    return int(math.ceil((n + 1) * (1.0 - alpha) - _EPS))


def split_conformal(scores, alpha: float) -> float:
    """The ``ceil((n+1)(1-alpha))``-th smallest score, or ``inf`` if that rank exceeds n."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    n = scores.shape[0]
    if n == 0:
        raise ValueError("split conformal needs at least one score")
    k = conformal_rank(n, alpha)
    if k > n:
        return math.inf
    return float(np.partition(scores, k - 1)[k - 1])


def weighted_split_conformal(scores, weights, alpha: float, test_weight: Optional[float] = None) -> float:
    """Weighted split-conformal threshold for a known covariate shift.

    Smallest score ``s`` with ``sum_{S_i <= s} w_i / (sum_i w_i + w_test) >= 1 - alpha``.
    ``test_weight`` defaults to ``max_i w_i``, the conservative choice when
    the test point's weight is unknown.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if scores.shape != weights.shape:
        raise ValueError("scores and weights must have the same length")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and non-negative")
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("weights are all zero")
    wt = float(weights.max()) if test_weight is None else float(test_weight)
    order = np.argsort(scores, kind="stable")
    cum = np.cumsum(weights[order]) / (total + wt)
    k = int(np.searchsorted(cum, (1.0 - alpha) - _EPS, side="left"))
    return math.inf if k >= len(cum) else float(scores[order][k])


def _mask(group, X) -> np.ndarray:
    if hasattr(group, "evaluate"):
        return np.asarray(group.evaluate(X)) > 0
    return np.asarray(group(X), dtype=bool)


@dataclass(frozen=True, eq=False)
class QuantileRule:
    """Score-threshold rule produced by a split-conformal baseline.

    ``mode`` is ``"marginal"`` (one ``q``), ``"group"`` (one ``q`` per group,
    combined by ``combine``) or ``"weighted"`` (threshold recomputed per test
    point from its shift weight).
    """

    family: ScoreFamily
    alpha: float
    mode: str
    q: float = math.inf
    group_q: tuple = ()
    groups: tuple = ()
    combine: str = "max"
    cal_scores: Optional[np.ndarray] = None
    cal_weights: Optional[np.ndarray] = None
    weight_fn: Optional[Callable] = None
    provenance: dict = field(default_factory=dict)

    def thresholds(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        n = X.shape[0]
        if self.mode == "marginal":
            return np.full(n, self.q)
        if self.mode == "group":
            M = np.column_stack([_mask(g, X) for g in self.groups])
            counts = M.sum(axis=1)
            if np.any(counts == 0):
                raise ValueError(f"record {int(np.argmin(counts))} belongs to no group")
            if self.combine == "require-partition" and np.any(counts > 1):
                raise ValueError(f"record {int(np.argmax(counts > 1))} belongs to several groups")
            Q = np.where(M, np.asarray(self.group_q)[None, :], -np.inf)
            return Q.max(axis=1)
        if self.mode == "weighted":
            return self._weighted_thresholds(X)
        raise ValueError(f"unknown mode {self.mode!r}")

    def _weighted_thresholds(self, X):
        wt = np.asarray(self.weight_fn(X), dtype=float)
        order = np.argsort(self.cal_scores, kind="stable")
        s = self.cal_scores[order]
        cum = np.cumsum(self.cal_weights[order])
        total = cum[-1]
        # smallest k with cum[k] >= (1 - alpha) * (total + w_test)
        k = np.searchsorted(cum, (1.0 - self.alpha) * (total + wt) - _EPS * (total + wt), side="left")
        out = np.full(X.shape[0], math.inf)
        ok = k < len(s)
        out[ok] = s[k[ok]]
        return out

    def covered(self, dataset: Dataset) -> np.ndarray:
        return dataset_scores(self.family, dataset) <= self.thresholds(dataset.X)


def marginal_rule(dataset: Dataset, alpha: float, family: Optional[ScoreFamily] = None) -> QuantileRule:
    family = family or family_for(dataset)
    q = split_conformal(dataset_scores(family, dataset), alpha)
    return QuantileRule(family, alpha, "marginal", q=q, provenance={"method": "split_conformal"})


def group_split_conformal(dataset: Dataset, groups: Sequence, alpha: float, combine: str = "max",
                          family: Optional[ScoreFamily] = None) -> QuantileRule:
    """Split conformal within each group; overlaps resolved by ``combine``.

    ``groups`` are membership predicates: callables ``X -> bool array`` or
    basis elements such as :class:`cpl.data.Equals`. ``combine="max"`` takes
    the largest threshold among a record's groups; ``"require-partition"``
    rejects overlapping groups.
    """
    if combine not in ("max", "require-partition"):
        raise ValueError(f"unknown combine policy {combine!r}")
    family = family or family_for(dataset)
    X = dataset.X
    M = np.column_stack([_mask(g, X) for g in groups])
    counts = M.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError(f"record {int(np.argmin(counts))} belongs to no group")
    if combine == "require-partition" and np.any(counts > 1):
        raise ValueError(f"record {int(np.argmax(counts > 1))} belongs to several groups")
    S = dataset_scores(family, dataset)
    qs = tuple(split_conformal(S[M[:, j]], alpha) if M[:, j].any() else math.inf for j in range(M.shape[1]))
    return QuantileRule(family, alpha, "group", group_q=qs, groups=tuple(groups), combine=combine,
                        provenance={"method": "group_split_conformal"})


def weighted_rule(dataset: Dataset, weight_fn: Callable, alpha: float,
                  family: Optional[ScoreFamily] = None) -> QuantileRule:
    """Weighted split conformal with a known likelihood ratio ``weight_fn(X)``."""
    family = family or family_for(dataset)
    w = np.asarray(weight_fn(dataset.X), dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with a positive sum")
    return QuantileRule(family, alpha, "weighted", cal_scores=dataset_scores(family, dataset),
                        cal_weights=w, weight_fn=weight_fn, provenance={"method": "weighted_split_conformal"})
