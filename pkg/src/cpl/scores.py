"""Conformity-score families and their set-length functionals.

Each family thresholds a score ``S(x, y) <= h`` and knows the length of the
resulting set, both exactly and under Gaussian smoothing of the indicator.
Regression sets are intervals, so the smoothed length has a closed form:
``2 * sigma * G(c / sigma)`` with ``G(z) = z * Phi(z) + phi(z)`` and ``c`` the
half-width of the hard interval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CalibrationRecord, Dataset
from .smoothing import SmoothingKernel, norm_cdf, norm_pdf


class ScoreFamily:
    kind: str = ""
    width: int = 0

    def describe(self) -> dict:
        return {"kind": self.kind}

    def check(self, record: CalibrationRecord):
        if record.payload.shape[0] != self.width:
            raise ValueError(f"payload of length {record.payload.shape[0]} does not match {self.kind} family")

    def check_dataset(self, dataset: Dataset):
        if dataset.payload_kind != self.kind:
            raise ValueError(f"dataset payload {dataset.payload_kind!r} does not match family {self.kind!r}")


@dataclass(frozen=True)
class AbsResidual(ScoreFamily):
    """``S(x, y) = |y - mu(x)|``; payload is the point prediction ``mu``."""

    kind = "abs_residual"
    width = 1

    def scores(self, payload, labels):
        return np.abs(labels - payload[:, 0])

    def half_offset(self, payload):
        return np.zeros(payload.shape[0])


@dataclass(frozen=True)
class CQR(ScoreFamily):
    """``S(x, y) = max(q_lo - y, y - q_hi)``; payload is ``(q_lo, q_hi)``."""

    kind = "cqr"
    width = 2

    def scores(self, payload, labels):
        return np.maximum(payload[:, 0] - labels, labels - payload[:, 1])

    def half_offset(self, payload):
        return 0.5 * (payload[:, 1] - payload[:, 0])


@dataclass(frozen=True)
class Classification(ScoreFamily):
    """``S(x, c) = s_c``; payload is one score per class."""

    K: int = 2
    kind = "classification"

    @property
    def width(self):
        return self.K

    def describe(self) -> dict:
        return {"kind": self.kind, "K": self.K}

    def scores(self, payload, labels):
        return payload[np.arange(payload.shape[0]), labels.astype(np.int64)]


def family_from_dict(d: dict) -> ScoreFamily:
    kind = d.get("kind")
    if kind == "abs_residual":
        return AbsResidual()
    if kind == "cqr":
        return CQR()
    if kind == "classification":
        return Classification(int(d["K"]))
    raise ValueError(f"unknown score family {kind!r}")


def family_for(dataset: Dataset) -> ScoreFamily:
    return family_from_dict({"kind": dataset.payload_kind, "K": dataset.K})


def _smooth_interval_length(c, sigma):
    z = c / sigma
    return np.maximum(2.0 * sigma * (z * norm_cdf(z) + norm_pdf(z)), 0.0)


def score(family: ScoreFamily, record: CalibrationRecord) -> float:
    family.check(record)
    return float(family.scores(record.payload[None, :], np.array([record.label]))[0])


def exact_length(family: ScoreFamily, record: CalibrationRecord, h: float) -> float:
    """Lebesgue length (regression) or cardinality (classification) of ``{y: S <= h}``."""
    family.check(record)
    if isinstance(family, Classification):
        return float(np.count_nonzero(record.payload <= h))
    c = h + float(family.half_offset(record.payload[None, :])[0])
    return 2.0 * max(c, 0.0)


def smoothed_length(family: ScoreFamily, record: CalibrationRecord, h: float, kernel: SmoothingKernel) -> float:
    family.check(record)
    if isinstance(family, Classification):
        return float(np.sum(norm_cdf((h - record.payload) / kernel.sigma)))
    c = h + float(family.half_offset(record.payload[None, :])[0])
    return float(_smooth_interval_length(c, kernel.sigma))


def smoothed_length_dh(family: ScoreFamily, record: CalibrationRecord, h: float, kernel: SmoothingKernel) -> float:
    family.check(record)
    if isinstance(family, Classification):
        return float(np.sum(norm_pdf((h - record.payload) / kernel.sigma)) / kernel.sigma)
    c = h + float(family.half_offset(record.payload[None, :])[0])
    return float(2.0 * norm_cdf(c / kernel.sigma))


def dataset_scores(family: ScoreFamily, dataset: Dataset) -> np.ndarray:
    family.check_dataset(dataset)
    return family.scores(dataset.payload, dataset.labels)


def exact_lengths(family: ScoreFamily, dataset: Dataset, h) -> np.ndarray:
    """Vectorised :func:`exact_length` over a dataset and per-record thresholds."""
    family.check_dataset(dataset)
    h = np.broadcast_to(np.asarray(h, dtype=float), (dataset.n,))
    if isinstance(family, Classification):
        return np.count_nonzero(dataset.payload <= h[:, None], axis=1).astype(float)
    return 2.0 * np.maximum(h + family.half_offset(dataset.payload), 0.0)
