"""Parameterised threshold maps ``h(x)`` and their parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import ShiftBasis


def _logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True, eq=False)
class Hypothesis:
    """Base class for threshold maps.

    ``feature_map`` (a :class:`ShiftBasis`, e.g. selected columns or the
    covariate-shift basis itself) transforms the raw features before the
    model sees them; ``None`` means raw features. ``squash`` bounds outputs to
    ``(0, squash)`` through a scaled logistic.
    """

    params: np.ndarray
    feature_map: Optional[ShiftBasis] = None
    squash: Optional[float] = None

    kind = "base"

    def __post_init__(self):
        p = np.array(self.params, dtype=float).reshape(-1)
        if not np.all(np.isfinite(p)):
            raise ValueError("hypothesis parameters must be finite")
        object.__setattr__(self, "params", p)
        if self.squash is not None and not self.squash > 0:
            raise ValueError("squash gamma must be positive")

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    def with_params(self, params) -> "Hypothesis":
        return replace(self, params=np.array(params, dtype=float))

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        return X if self.feature_map is None else self.feature_map.matrix(X)

    # subclasses implement _raw / _raw_backward on transformed features Z
    def _raw(self, Z):
        raise NotImplementedError

    def _raw_backward(self, Z, ctx, gz):
        raise NotImplementedError

    def forward(self, Z):
        """Thresholds for transformed features ``Z``; returns ``(h, ctx)``."""
        z, ctx = self._raw(Z)
        if self.squash is None:
            return z, (ctx, None)
        s = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
        return self.squash * s, (ctx, s)

    def backward(self, Z, state, g) -> np.ndarray:
        """Vector-Jacobian product ``sum_i g_i * dh_i/dtheta``."""
        ctx, s = state
        gz = g if s is None else g * self.squash * s * (1.0 - s)
        return self._raw_backward(Z, ctx, gz)

    def evaluate(self, X) -> np.ndarray:
        return self.forward(self.features(X))[0]

    def jacobian(self, X) -> np.ndarray:
        """Full ``(n, n_params)`` Jacobian; intended for small inputs."""
        Z = self.features(X)
        _, state = self.forward(Z)
        rows = []
        for i in range(Z.shape[0]):
            g = np.zeros(Z.shape[0])
            g[i] = 1.0
            rows.append(self.backward(Z, state, g))
        return np.array(rows)

    def describe(self) -> dict:
        out = {"kind": self.kind, "params": [float(v) for v in self.params],
               "squash": self.squash,
               "feature_map": None if self.feature_map is None else self.feature_map.specs}
        return out


@dataclass(frozen=True, eq=False)
class Constant(Hypothesis):
    kind = "constant"

    def _raw(self, Z):
        if self.n_params != 1:
            raise ValueError("Constant hypothesis has exactly one parameter")
        return np.full(Z.shape[0], self.params[0]), None

    def _raw_backward(self, Z, ctx, gz):
        return np.array([np.sum(gz)])


@dataclass(frozen=True, eq=False)
class Linear(Hypothesis):
    """``h = <w, psi(x)> + b``; parameters are ``(w_0, ..., w_{q-1}, b)``."""

    kind = "linear"

    def _check(self, Z):
        if Z.shape[1] != self.n_params - 1:
            raise ValueError(f"Linear hypothesis expects {self.n_params - 1} inputs, got {Z.shape[1]}")

    def _raw(self, Z):
        self._check(Z)
        return Z @ self.params[:-1] + self.params[-1], None

    def _raw_backward(self, Z, ctx, gz):
        return np.concatenate([gz @ Z, [np.sum(gz)]])


@dataclass(frozen=True, eq=False)
class MLP1(Hypothesis):
    """One tanh hidden layer of ``width`` units.

    Parameter layout: input weights (width x q, row-major), hidden biases,
    output weights, output bias.
    """

    width: int = 16
    kind = "mlp1"

    def _split(self, q):
        m = self.width
        if m < 1 or self.n_params != m * q + 2 * m + 1:
            raise ValueError(f"MLP1 with width {m} expects {m * q + 2 * m + 1} parameters for {q} inputs")
        p = self.params
        W1 = p[: m * q].reshape(m, q)
        b1 = p[m * q: m * q + m]
        w2 = p[m * q + m: m * q + 2 * m]
        return W1, b1, w2, p[-1]

    def _raw(self, Z):
        W1, b1, w2, b2 = self._split(Z.shape[1])
        H = np.tanh(Z @ W1.T + b1)
        return H @ w2 + b2, H

    def _raw_backward(self, Z, H, gz):
        W1, b1, w2, b2 = self._split(Z.shape[1])
        gA = np.outer(gz, w2) * (1.0 - H * H)
        return np.concatenate([(gA.T @ Z).ravel(), gA.sum(axis=0), gz @ H, [np.sum(gz)]])

    def describe(self) -> dict:
        out = super().describe()
        out["width"] = self.width
        return out


def _bias_param(bias, squash):
    if squash is None:
        return float(bias)
    frac = np.clip(bias / squash, 1e-6, 1 - 1e-6)
    return float(_logit(frac))


def constant(bias: float = 0.0, *, squash=None) -> Constant:
    return Constant(np.array([_bias_param(bias, squash)]), squash=squash)


def linear(n_inputs: int, bias: float = 0.0, weights=None, *, feature_map=None, squash=None) -> Linear:
    w = np.zeros(n_inputs) if weights is None else np.asarray(weights, dtype=float)
    return Linear(np.concatenate([w, [_bias_param(bias, squash)]]), feature_map=feature_map, squash=squash)


def mlp1(n_inputs: int, width: int = 16, bias: float = 0.0, *, seed: int = 0,
         feature_map=None, squash=None, init_scale: float = 1.0) -> MLP1:
    """Seeded MLP1 with random input weights and a zero output layer.

    The zero output layer makes the initial map the constant ``bias``.
    """
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((width, n_inputs)) * init_scale / np.sqrt(max(n_inputs, 1))
    params = np.concatenate([W1.ravel(), np.zeros(width), np.zeros(width), [_bias_param(bias, squash)]])
    return MLP1(params, feature_map=feature_map, squash=squash, width=width)


def hypothesis_from_dict(d: dict) -> Hypothesis:
    fm = None if d.get("feature_map") is None else ShiftBasis.parse(d["feature_map"])
    kw = dict(params=np.array(d["params"], dtype=float), feature_map=fm, squash=d.get("squash"))
    kind = d["kind"]
    if kind == "constant":
        return Constant(**kw)
    if kind == "linear":
        return Linear(**kw)
    if kind == "mlp1":
        return MLP1(width=int(d["width"]), **kw)
    raise ValueError(f"unknown hypothesis kind {kind!r}")


def h_eval(hyp: Hypothesis, features) -> float:
    features = np.asarray(features, dtype=float)
    if features.ndim != 1:
        raise ValueError("features must be a vector")
    return float(hyp.evaluate(features[None, :])[0])


def h_grad_params(hyp: Hypothesis, features) -> np.ndarray:
    features = np.asarray(features, dtype=float)
    if features.ndim != 1:
        raise ValueError("features must be a vector")
    return hyp.jacobian(features[None, :])[0]
