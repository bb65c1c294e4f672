"""Gaussian-erf relaxation of the coverage indicator ``1[s <= h]``."""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import ndtr

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class SmoothingKernel:
    """Gaussian smoothing scale, in score units."""

    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be a positive finite real, got {self.sigma!r}")


def norm_cdf(z):
    """Standard normal CDF (vectorised)."""
    return ndtr(z)


def norm_pdf(z):
    """Standard normal density (vectorised)."""
    z = np.asarray(z, dtype=float)
    return np.exp(-0.5 * z * z) / SQRT_2PI


def smoothed_indicator(s, h, kernel: SmoothingKernel):
    """Smooth surrogate of ``1[s <= h]``.

    Equal to ``0.5 * (1 + erf((h - s) / (sqrt(2) * sigma)))``; increasing in
    ``h``, decreasing in ``s`` and tending to the hard indicator as sigma -> 0.
    """
    z = (np.asarray(h, dtype=float) - np.asarray(s, dtype=float)) / kernel.sigma
    out = ndtr(z)
    return float(out) if np.ndim(out) == 0 else out


def smoothed_indicator_dh(s, h, kernel: SmoothingKernel):
    """Partial derivative of :func:`smoothed_indicator` with respect to ``h``.

    A Gaussian bump of height ``1 / (sqrt(2 pi) sigma)`` centred at ``h = s``.
    """
    z = (np.asarray(h, dtype=float) - np.asarray(s, dtype=float)) / kernel.sigma
    out = norm_pdf(z) / kernel.sigma
    return float(out) if np.ndim(out) == 0 else out


def lipschitz_bound(kernel: SmoothingKernel) -> float:
    """Sup over (s, h) of the h-derivative of the smoothed indicator."""
    return 1.0 / (SQRT_2PI * kernel.sigma)
