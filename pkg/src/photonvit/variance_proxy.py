"""Closed-form noise variance of attention logits and ordering-flip statistics.

A query/key pair of width ``d_k`` is cut into contiguous bank slices of
``bank_size`` elements (the last slice zero-padded). With per-bank variance
``s_b^2`` the logit ``s = <q, k> / sqrt(d_k)`` gets variance::

    v = (1/d_k) * sum_b s_b^2 * |q_b|^2 * |k_b|^2

and with a per-bank covariance ``S_b``::

    v = (1/d_k) * sum_b (q_b * k_b)^T S_b (q_b * k_b)

The two forms are not reductions of each other: ``S_b = s_b^2 I`` turns the
second into ``sum_i q_i^2 k_i^2``, which is smaller than the norm product.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core_math import std_normal_cdf
from .errors import ParameterError, ShapeError

BANK_SIZE = 15


@dataclass(frozen=True)
class BankStats:
    """Per-bank noise statistics; set exactly one of ``variances``/``covariances``."""

    variances: np.ndarray = None
    covariances: np.ndarray = None
    bank_size: int = BANK_SIZE

    def __post_init__(self):
        if (self.variances is None) == (self.covariances is None):
            raise ParameterError("give exactly one of variances or covariances")
        if self.variances is not None:
            v = np.asarray(self.variances, dtype=np.float64).ravel()
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ParameterError("bank variances must be finite and >= 0")
            object.__setattr__(self, "variances", v)
        else:
            c = np.asarray(self.covariances, dtype=np.float64)
            if c.ndim == 2:
                c = c[None]
            if c.shape[1:] != (self.bank_size, self.bank_size):
                raise ShapeError(f"covariances must be (n_banks, {self.bank_size}, {self.bank_size})")
            if not np.allclose(c, np.swapaxes(c, 1, 2), atol=1e-10):
                raise ParameterError("bank covariances must be symmetric")
            if np.min(np.linalg.eigvalsh(c)) < -1e-10:
                raise ParameterError("bank covariances must be positive semi-definite")
            object.__setattr__(self, "covariances", c)

    @property
    def n_banks(self):
        return len(self.variances) if self.variances is not None else self.covariances.shape[0]

    @property
    def is_diagonal(self):
        return self.variances is not None

    @classmethod
    def uniform(cls, n_banks, sigma_sq, bank_size=BANK_SIZE):
        return cls(variances=np.full(n_banks, float(sigma_sq)), bank_size=bank_size)

    @classmethod
    def for_width(cls, d_k, sigma_sq, bank_size=BANK_SIZE):
        return cls.uniform(n_banks_for(d_k, bank_size), sigma_sq, bank_size)


def n_banks_for(d_k, bank_size=BANK_SIZE):
    return math.ceil(d_k / bank_size)


def bank_slices(v, bank_size=BANK_SIZE):
    """Reshape the last axis into ``(n_banks, bank_size)``, zero-padding the tail."""
    v = np.asarray(v, dtype=np.float64)
    d = v.shape[-1]
    nb = n_banks_for(d, bank_size)
    pad = nb * bank_size - d
    if pad:
        v = np.concatenate([v, np.zeros(v.shape[:-1] + (pad,))], axis=-1)
    return v.reshape(v.shape[:-1] + (nb, bank_size))


def _check_banks(stats: BankStats, nb):
    if stats.n_banks != nb:
        raise ShapeError(f"bank stats describe {stats.n_banks} banks, vectors need {nb}")


def variance_map_diag(q, k, stats: BankStats, d_k=None):
    """Diagonal proxy for every (query, key) pair: ``q (..., T, d)``, ``k (..., U, d)`` -> ``(..., T, U)``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d_k = q.shape[-1] if d_k is None else d_k
    nq = np.sum(bank_slices(q, stats.bank_size) ** 2, axis=-1)
    nk = np.sum(bank_slices(k, stats.bank_size) ** 2, axis=-1)
    _check_banks(stats, nq.shape[-1])
    return np.matmul(nq * stats.variances, np.swapaxes(nk, -1, -2)) / d_k


def variance_map_diag_backward(dv, q, k, stats: BankStats, d_k=None):
    """Gradients of ``sum(dv * variance_map_diag(q, k))`` with respect to ``q`` and ``k``."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d = q.shape[-1]
    d_k = d if d_k is None else d_k
    qs = bank_slices(q, stats.bank_size)
    ks = bank_slices(k, stats.bank_size)
    nq = np.sum(qs ** 2, axis=-1)
    nk = np.sum(ks ** 2, axis=-1)
    d_nq = np.matmul(dv, nk) * stats.variances / d_k
    d_nk = np.matmul(np.swapaxes(dv, -1, -2), nq) * stats.variances / d_k
    dq = (2.0 * qs * d_nq[..., None]).reshape(q.shape[:-1] + (-1,))[..., :d]
    dk = (2.0 * ks * d_nk[..., None]).reshape(k.shape[:-1] + (-1,))[..., :d]
    return dq, dk


def _pair_products(v, bank_size):
    s = bank_slices(v, bank_size)
    return s[..., :, None] * s[..., None, :]


def variance_map_cov(q, k, stats: BankStats, d_k=None):
    """Covariance proxy for every (query, key) pair."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d_k = q.shape[-1] if d_k is None else d_k
    bs = stats.bank_size
    qq = _pair_products(q, bs)
    kk = _pair_products(k, bs)
    _check_banks(stats, qq.shape[-3])
    # v[t,u] = sum_b sum_ij qq[t,b,i,j] S[b,i,j] kk[u,b,i,j]
    qf = (qq * stats.covariances).reshape(qq.shape[:-3] + (-1,))
    kf = kk.reshape(kk.shape[:-3] + (-1,))
    return np.matmul(qf, np.swapaxes(kf, -1, -2)) / d_k


def variance_map_cov_backward(dv, q, k, stats: BankStats, d_k=None):
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    d = q.shape[-1]
    d_k = d if d_k is None else d_k
    bs = stats.bank_size
    qs = bank_slices(q, bs)
    ks = bank_slices(k, bs)
    qq = qs[..., :, None] * qs[..., None, :]
    kk = ks[..., :, None] * ks[..., None, :]
    flat = qq.shape[-3] * bs * bs
    # gradient wrt the pair products, then through the symmetric outer product
    g_qq = np.matmul(dv, kk.reshape(kk.shape[:-3] + (flat,))).reshape(qq.shape) * stats.covariances / d_k
    g_kk = np.matmul(np.swapaxes(dv, -1, -2), (qq * stats.covariances).reshape(qq.shape[:-3] + (flat,)))
    g_kk = g_kk.reshape(kk.shape) / d_k
    dq = (np.sum(g_qq * qs[..., None, :], axis=-1) + np.sum(g_qq * qs[..., :, None], axis=-2))
    dk = (np.sum(g_kk * ks[..., None, :], axis=-1) + np.sum(g_kk * ks[..., :, None], axis=-2))
    return dq.reshape(q.shape[:-1] + (-1,))[..., :d], dk.reshape(k.shape[:-1] + (-1,))[..., :d]


def variance_map(q, k, stats: BankStats, d_k=None):
    if stats.is_diagonal:
        return variance_map_diag(q, k, stats, d_k)
    return variance_map_cov(q, k, stats, d_k)


def variance_map_backward(dv, q, k, stats: BankStats, d_k=None):
    if stats.is_diagonal:
        return variance_map_diag_backward(dv, q, k, stats, d_k)
    return variance_map_cov_backward(dv, q, k, stats, d_k)


def logit_variance_diag(q_t, k_u, stats: BankStats, d_k=None):
    q_t = np.asarray(q_t, dtype=np.float64)
    k_u = np.asarray(k_u, dtype=np.float64)
    return float(variance_map_diag(q_t[None], k_u[None], stats, d_k)[0, 0])


def logit_variance_cov(q_t, k_u, stats: BankStats, d_k=None):
    q_t = np.asarray(q_t, dtype=np.float64)
    k_u = np.asarray(k_u, dtype=np.float64)
    return float(variance_map_cov(q_t[None], k_u[None], stats, d_k)[0, 0])


def flip_probability(margin, sigma):
    """Probability ``Phi(-margin / sigma)`` that Gaussian noise reverses a clean ordering."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ParameterError("sigma must be > 0")
    out = std_normal_cdf(-np.asarray(margin, dtype=np.float64) / sigma)
    return float(out) if np.ndim(out) == 0 else out


def top1(row_logits):
    """Index of the largest logit; ties go to the lower index."""
    return int(np.argmax(np.asarray(row_logits)))


def competitor_set(row_logits, row_variances, k):
    """Up to ``k`` strongest competitors of the row's top-1 key.

    Takes the ``ceil(k/2)`` largest logits and the ``floor(k/2)`` largest
    variances (top-1 excluded), deduplicates, then refills in logit order.
    Ties are broken toward the lower index. Returned sorted ascending.
    """
    s = np.asarray(row_logits, dtype=np.float64)
    v = np.asarray(row_variances, dtype=np.float64)
    if s.shape != v.shape or s.ndim != 1:
        raise ShapeError("row logits and variances must be equal-length vectors")
    best = top1(s)
    by_logit = [int(i) for i in np.argsort(-s, kind="stable") if i != best]
    by_var = [int(i) for i in np.argsort(-v, kind="stable") if i != best]
    size = min(k, len(s) - 1)
    chosen = []
    for i in by_logit[: math.ceil(k / 2)] + by_var[: k // 2]:
        if i not in chosen:
            chosen.append(i)
    for i in by_logit:
        if len(chosen) >= size:
            break
        if i not in chosen:
            chosen.append(i)
    return tuple(sorted(chosen[:size]))


@dataclass(frozen=True)
class LogitVarianceMap:
    """Per-logit variances of one attention map with its clean logits."""

    logits: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if np.shape(self.logits) != np.shape(self.v):
            raise ShapeError("logits and variances must share a shape")
        if np.any(np.asarray(self.v) < 0):
            raise ParameterError("variances must be >= 0")

    @property
    def top1(self):
        return np.argmax(self.logits, axis=-1)

    def pair_variance(self, t, j):
        i_star = int(self.top1[t])
        return float(self.v[t, i_star] + self.v[t, j])

    def flip_probabilities(self, t):
        """Flip probability of every competitor ``j`` against the top-1 of row ``t``."""
        i_star = int(self.top1[t])
        margins = self.logits[t, i_star] - self.logits[t]
        sig = np.sqrt(self.v[t, i_star] + self.v[t])
        out = std_normal_cdf(-margins / np.where(sig > 0, sig, np.inf))
        out[i_star] = np.nan
        return out
