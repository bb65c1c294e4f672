"""Per-record hot loops of the smoothed objective.

Each ``*_pass`` returns ``(objective, r, gh)`` where, with normalised record
weights ``w``,

* ``objective = sum_i w_i * (f_i * (I_i - (1 - alpha)) - len_i)``
* ``r_i = w_i * (I_i - (1 - alpha))``  (so ``grad_beta = Phi.T @ r``)
* ``gh_i = w_i * (f_i * dI_i - dlen_i)``  (upstream gradient for ``h_i``)

``I`` is the smoothed coverage indicator and ``len`` the smoothed set length.
The numba and numpy variants compute the same quantities; which one runs is
decided at import time (see :mod:`cpl._accel`).
"""

import math

import numpy as np
from scipy.special import ndtr

from ._accel import njit, use_numba

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------- numba path

@njit(cache=True, fastmath=False)
def _regression_pass_nb(S, off, h, f, w, target, sigma):
    n = S.shape[0]
    r = np.empty(n)
    gh = np.empty(n)
    obj = 0.0
    for i in range(n):
        z = (h[i] - S[i]) / sigma
        ind = 0.5 * math.erfc(-z * _INV_SQRT2)
        dind = math.exp(-0.5 * z * z) * _INV_SQRT2PI / sigma
        c = (h[i] + off[i]) / sigma
        cdf_c = 0.5 * math.erfc(-c * _INV_SQRT2)
        slen = 2.0 * sigma * (c * cdf_c + math.exp(-0.5 * c * c) * _INV_SQRT2PI)
        if slen < 0.0:
            slen = 0.0
        dslen = 2.0 * cdf_c
        obj += w[i] * (f[i] * (ind - target) - slen)
        r[i] = w[i] * (ind - target)
        gh[i] = w[i] * (f[i] * dind - dslen)
    return obj, r, gh


@njit(cache=True, fastmath=False)
def _classification_pass_nb(S, C, h, f, w, target, sigma):
    n, K = C.shape
    r = np.empty(n)
    gh = np.empty(n)
    obj = 0.0
    for i in range(n):
        z = (h[i] - S[i]) / sigma
        ind = 0.5 * math.erfc(-z * _INV_SQRT2)
        dind = math.exp(-0.5 * z * z) * _INV_SQRT2PI / sigma
        slen = 0.0
        dslen = 0.0
        for k in range(K):
            zk = (h[i] - C[i, k]) / sigma
            slen += 0.5 * math.erfc(-zk * _INV_SQRT2)
            dslen += math.exp(-0.5 * zk * zk) * _INV_SQRT2PI / sigma
        obj += w[i] * (f[i] * (ind - target) - slen)
        r[i] = w[i] * (ind - target)
        gh[i] = w[i] * (f[i] * dind - dslen)
    return obj, r, gh


# ---------------------------------------------------------------- numpy path

def _regression_pass_np(S, off, h, f, w, target, sigma):
    z = (h - S) / sigma
    ind = ndtr(z)
    dind = np.exp(-0.5 * z * z) * (_INV_SQRT2PI / sigma)
    c = (h + off) / sigma
    cdf_c = ndtr(c)
    slen = np.maximum(2.0 * sigma * (c * cdf_c + np.exp(-0.5 * c * c) * _INV_SQRT2PI), 0.0)
    r = w * (ind - target)
    gh = w * (f * dind - 2.0 * cdf_c)
    obj = float(np.sum(f * r - w * slen))
    return obj, r, gh


def _classification_pass_np(S, C, h, f, w, target, sigma):
    z = (h - S) / sigma
    ind = ndtr(z)
    dind = np.exp(-0.5 * z * z) * (_INV_SQRT2PI / sigma)
    zk = (h[:, None] - C) / sigma
    slen = ndtr(zk).sum(axis=1)
    dslen = np.exp(-0.5 * zk * zk).sum(axis=1) * (_INV_SQRT2PI / sigma)
    r = w * (ind - target)
    gh = w * (f * dind - dslen)
    obj = float(np.sum(f * r - w * slen))
    return obj, r, gh


def regression_pass(S, off, h, f, w, target, sigma, *, numba=None):
    if numba is None:
        numba = use_numba()
    fn = _regression_pass_nb if numba else _regression_pass_np
    obj, r, gh = fn(S, off, h, f, w, float(target), float(sigma))
    return float(obj), r, gh


def classification_pass(S, C, h, f, w, target, sigma, *, numba=None):
    if numba is None:
        numba = use_numba()
    fn = _classification_pass_nb if numba else _classification_pass_np
    obj, r, gh = fn(S, C, h, f, w, float(target), float(sigma))
    return float(obj), r, gh
