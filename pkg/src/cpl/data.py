"""Calibration data, the covariate-shift basis and solver configuration."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

TASKS = ("regression", "classification")
PAYLOAD_KINDS = ("abs_residual", "cqr", "classification")


@dataclass(frozen=True)
class CalibrationRecord:
    """One calibration row: covariates, score payload and observed label."""

    features: np.ndarray
    payload: np.ndarray
    label: float

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float).reshape(-1))
        object.__setattr__(self, "payload", np.asarray(self.payload, dtype=float).reshape(-1))


@dataclass(frozen=True)
class Violation:
    index: Optional[int]
    field: str
    message: str

    def __str__(self):
        where = "dataset" if self.index is None else f"record {self.index}"
        return f"{where}: {self.field}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok


def _payload_width(kind: str, K: Optional[int]) -> Optional[int]:
    if kind == "abs_residual":
        return 1
    if kind == "cqr":
        return 2
    return K


@dataclass(frozen=True, eq=False)
class Dataset:
    """A homogeneous collection of :class:`CalibrationRecord`.

    Construction is lenient so that :func:`validate_dataset` can report
    problems; the array views (``X``, ``payload``, ``labels``) require a
    valid dataset. Optional ``weights`` give each record a probability mass
    (used for exact population objectives on discrete instances).
    """

    records: tuple
    p: int
    task: str
    payload_kind: str
    K: Optional[int] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.weights is not None:
            object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))

    @classmethod
    def from_arrays(cls, X, payload, labels, *, task: str, payload_kind: str,
                    K: Optional[int] = None, weights=None) -> "Dataset":
        X = np.ascontiguousarray(np.asarray(X, dtype=float))
        if X.ndim == 1:
            X = X[:, None]
        payload = np.ascontiguousarray(np.asarray(payload, dtype=float))
        if payload.ndim == 1:
            payload = payload[:, None]
        labels = np.asarray(labels, dtype=float).reshape(-1)
        if not (len(X) == len(payload) == len(labels)):
            raise ValueError("X, payload and labels must have the same number of rows")
        records = tuple(CalibrationRecord(X[i], payload[i], labels[i]) for i in range(len(X)))
        ds = cls(records, X.shape[1], task, payload_kind, K, weights)
        # seed the cached views so large datasets never rebuild them row by row
        ds.__dict__["X"] = X
        ds.__dict__["payload"] = payload
        ds.__dict__["labels"] = labels
        return ds

    def __len__(self):
        return len(self.records)

    @property
    def n(self) -> int:
        return len(self.records)

    def _require_valid(self):
        report = validate_dataset(self)
        if not report.ok:
            raise ValueError("invalid dataset: " + "; ".join(map(str, report.violations[:5])))

    @cached_property
    def X(self) -> np.ndarray:
        self._require_valid()
        return np.stack([r.features for r in self.records])

    @cached_property
    def payload(self) -> np.ndarray:
        self._require_valid()
        return np.stack([r.payload for r in self.records])

    @cached_property
    def labels(self) -> np.ndarray:
        self._require_valid()
        return np.array([r.label for r in self.records], dtype=float)

    @cached_property
    def normalized_weights(self) -> np.ndarray:
        """Record weights summing to one (uniform when none were given)."""
        if self.weights is None:
            return np.full(self.n, 1.0 / self.n)
        return self.weights / self.weights.sum()

    def with_columns(self, cols) -> "Dataset":
        """Copy with extra feature columns appended (shape ``(n,)`` or ``(n, k)``)."""
        cols = np.asarray(cols, dtype=float)
        if cols.ndim == 1:
            cols = cols[:, None]
        if cols.shape[0] != self.n:
            raise ValueError(f"extra columns have {cols.shape[0]} rows, dataset has {self.n}")
        return Dataset.from_arrays(np.hstack([self.X, cols]), self.payload, self.labels, task=self.task,
                                   payload_kind=self.payload_kind, K=self.K, weights=self.weights)

    def subset(self, mask) -> "Dataset":
        return self.take(np.flatnonzero(np.asarray(mask)))

    def take(self, idx) -> "Dataset":
        """Records at the integer positions ``idx``, in that order."""
        idx = np.asarray(idx, dtype=np.intp)
        w = None if self.weights is None else self.weights[idx]
        return Dataset.from_arrays(self.X[idx], self.payload[idx], self.labels[idx], task=self.task,
                                   payload_kind=self.payload_kind, K=self.K, weights=w)


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Check every Dataset invariant; violations are returned, never raised."""
    out = []
    if dataset.task not in TASKS:
        out.append(Violation(None, "task", f"unknown task {dataset.task!r}"))
    if dataset.payload_kind not in PAYLOAD_KINDS:
        out.append(Violation(None, "payload_kind", f"unknown payload kind {dataset.payload_kind!r}"))
    if (dataset.task == "classification") != (dataset.payload_kind == "classification"):
        out.append(Violation(None, "payload_kind", "payload kind does not match task"))
    if dataset.task == "classification" and (dataset.K is None or dataset.K < 1):
        out.append(Violation(None, "K", "classification requires K >= 1"))
    if not dataset.records:
        out.append(Violation(None, "records", "empty dataset"))
        return ValidationReport(tuple(out))
    if dataset.weights is not None:
        w = dataset.weights
        if w.shape != (len(dataset.records),) or not np.all(np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
            out.append(Violation(None, "weights", "weights must be finite, non-negative, one per record, positive sum"))

    width = _payload_width(dataset.payload_kind, dataset.K)
    for i, r in enumerate(dataset.records):
        if r.features.shape[0] != dataset.p:
            out.append(Violation(i, "features", f"length {r.features.shape[0]} != p={dataset.p}"))
        elif not np.all(np.isfinite(r.features)):
            out.append(Violation(i, "features", "non-finite value"))
        if width is not None and r.payload.shape[0] != width:
            out.append(Violation(i, "payload", f"length {r.payload.shape[0]} != {width}"))
        elif not np.all(np.isfinite(r.payload)):
            out.append(Violation(i, "payload", "non-finite value"))
        elif dataset.payload_kind == "cqr" and r.payload[0] > r.payload[1]:
            out.append(Violation(i, "payload", "q_lo > q_hi"))
        if not np.isfinite(r.label):
            out.append(Violation(i, "label", "non-finite label"))
        elif dataset.task == "classification" and dataset.K is not None:
            if r.label != int(r.label) or not (0 <= r.label < dataset.K):
                out.append(Violation(i, "label", f"class index {r.label!r} outside [0, {dataset.K})"))
    return ValidationReport(tuple(out))


# --------------------------------------------------------------------------
# covariate-shift basis


@dataclass(frozen=True)
class Intercept:
    def evaluate(self, X):
        return np.ones(X.shape[0])

    @property
    def column(self):
        return None

    @property
    def spec(self):
        return "intercept"


@dataclass(frozen=True)
class Column:
    """Raw feature column ``j``."""

    column: int

    def evaluate(self, X):
        return X[:, self.column].astype(float)

    @property
    def spec(self):
        return f"col:{self.column}"


@dataclass(frozen=True)
class Equals:
    """Group indicator ``1[x_j == value]``."""

    column: int
    value: float

    def evaluate(self, X):
        return (X[:, self.column] == self.value).astype(float)

    @property
    def spec(self):
        return f"eq:{self.column}:{self.value!r}"


@dataclass(frozen=True)
class AtLeast:
    """Threshold indicator ``1[x_j >= threshold]``."""

    column: int
    threshold: float

    def evaluate(self, X):
        return (X[:, self.column] >= self.threshold).astype(float)

    @property
    def spec(self):
        return f"ge:{self.column}:{self.threshold!r}"


BasisElement = Union[Intercept, Column, Equals, AtLeast]


def parse_element(spec: str) -> BasisElement:
    """Parse one basis element from ``intercept``, ``col:j``, ``eq:j:v`` or ``ge:j:t``."""
    parts = spec.strip().split(":")
    kind = parts[0]
    try:
        if kind == "intercept" and len(parts) == 1:
            return Intercept()
        if kind == "col" and len(parts) == 2:
            return Column(int(parts[1]))
        if kind == "eq" and len(parts) == 3:
            return Equals(int(parts[1]), float(parts[2]))
        if kind == "ge" and len(parts) == 3:
            return AtLeast(int(parts[1]), float(parts[2]))
    except ValueError:
        pass
    raise ValueError(f"bad basis element {spec!r}")


@dataclass(frozen=True)
class ShiftBasis:
    """Feature map ``Phi: R^p -> R^d`` spanning the covariate-shift class.

    ``bound`` is the sup-norm of the basis over a dataset. Call :meth:`bind`
    to (re)compute it; a declared bound smaller than the empirical one is
    rejected.
    """

    elements: tuple
    bound: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        if not self.elements:
            raise ValueError("basis needs at least one element")

    @classmethod
    def parse(cls, specs: Union[str, Sequence[str]]) -> "ShiftBasis":
        if isinstance(specs, str):
            specs = [s for s in specs.split(",") if s.strip()]
        return cls(tuple(parse_element(s) for s in specs))

    @property
    def d(self) -> int:
        return len(self.elements)

    @property
    def specs(self) -> list:
        return [e.spec for e in self.elements]

    @property
    def max_column(self) -> int:
        cols = [e.column for e in self.elements if e.column is not None]
        return max(cols) if cols else -1

    def matrix(self, X) -> np.ndarray:
        """Basis values for every row of ``X``; shape (n, d)."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if self.max_column >= X.shape[1]:
            raise ValueError(f"basis references column {self.max_column} but features have length {X.shape[1]}")
        Phi = np.column_stack([e.evaluate(X) for e in self.elements])
        if not np.all(np.isfinite(Phi)):
            raise ValueError("basis produced non-finite values")
        return Phi

    def bind(self, X) -> "ShiftBasis":
        """Return a copy carrying the empirical sup-norm bound over ``X``."""
        B = float(np.max(np.abs(self.matrix(X))))
        if self.bound is not None and self.bound < B:
            raise ValueError(f"declared basis bound {self.bound} is below the empirical bound {B}")
        return ShiftBasis(self.elements, B)


def basis_values(basis: ShiftBasis, features) -> np.ndarray:
    """Evaluate ``Phi`` on a single feature vector; returns shape (d,)."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 1:
        raise ValueError("features must be a vector")
    return basis.matrix(features[None, :])[0]


@dataclass(frozen=True)
class ShiftCoefficients:
    """Coefficients ``beta`` of ``f_beta(x) = <beta, Phi(x)>``."""

    beta: np.ndarray

    def __post_init__(self):
        b = np.array(self.beta, dtype=float).reshape(-1)
        if not np.all(np.isfinite(b)):
            raise ValueError("beta must be finite")
        object.__setattr__(self, "beta", b)

    def __call__(self, Phi) -> np.ndarray:
        return np.asarray(Phi) @ self.beta


# --------------------------------------------------------------------------
# solver configuration


@dataclass(frozen=True)
class SolverConfig:
    """Knobs for the gradient descent-ascent calibration loop.

    ``sigma="auto"`` uses ``sigma_scale * std(scores) / sqrt(n)`` clamped below
    at 1e-4. ``sigma_start``, when set, anneals sigma geometrically from that
    value down to the target over the first ``anneal_frac`` of the outer
    iterations.
    """

    alpha: float = 0.1
    sigma: Union[float, str] = "auto"
    sigma_scale: float = 1.0
    step_h: float = 0.01
    step_beta: float = 0.05
    inner_steps_h: int = 5
    inner_steps_beta: int = 1
    max_outer_iters: int = 2000
    tol_gap: float = 1e-3
    tol_grad: float = 1e-3
    seed: int = 0
    squash_gamma: Optional[float] = None
    batch_size: Optional[int] = None
    sigma_start: Optional[float] = None
    anneal_frac: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if isinstance(self.sigma, str):
            if self.sigma != "auto":
                raise ValueError("sigma must be a positive real or 'auto'")
        elif not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be positive")
        for name in ("sigma_scale", "step_h", "step_beta", "tol_gap", "tol_grad"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive real")
        for name in ("inner_steps_h", "inner_steps_beta", "max_outer_iters"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in 64 bits")
        if self.squash_gamma is not None and not self.squash_gamma > 0:
            raise ValueError("squash_gamma must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.sigma_start is not None and not self.sigma_start > 0:
            raise ValueError("sigma_start must be positive")
        if not (0.0 < self.anneal_frac <= 1.0):
            raise ValueError("anneal_frac must lie in (0, 1]")
