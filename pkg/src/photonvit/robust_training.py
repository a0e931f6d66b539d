"""Chance-constrained margin loss and noise-aware layer normalization."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core_math import std_normal_quantile
from .errors import ParameterError, ShapeError
from .noise_model import NoiseParams

DENOM_GUARD = 1e-12


@dataclass(frozen=True)
class CCTConfig:
    tau_start: float = 0.80
    tau_end: float = 0.95
    anneal_epochs: int = 10
    k: int = 4
    lambda_cct: float = 0.1
    active_layers: tuple = None
    active_heads: tuple = None

    def __post_init__(self):
        if not (0 < self.tau_start <= self.tau_end < 1):
            raise ParameterError(f"need 0 < tau_start <= tau_end < 1, got {self.tau_start}, {self.tau_end}")
        if self.lambda_cct < 0:
            raise ParameterError(f"lambda_cct must be >= 0, got {self.lambda_cct}")
        if self.k < 1:
            raise ParameterError(f"competitor set size must be >= 1, got {self.k}")
        if self.anneal_epochs < 0:
            raise ParameterError("anneal_epochs must be >= 0")

    def layers_for(self, n_layers):
        """Active layer indices; defaults to the first and the last block."""
        if self.active_layers is None:
            return tuple(sorted({0, n_layers - 1}))
        return tuple(i for i in self.active_layers if 0 <= i < n_layers)

    def heads_for(self, n_heads):
        if self.active_heads is None:
            return tuple(range(n_heads))
        return tuple(h for h in self.active_heads if 0 <= h < n_heads)


def tau_at(cfg: CCTConfig, epoch):
    if cfg.anneal_epochs == 0 or epoch >= cfg.anneal_epochs:
        return cfg.tau_end
    frac = max(epoch, 0) / cfg.anneal_epochs
    return cfg.tau_start + frac * (cfg.tau_end - cfg.tau_start)


def tau_schedule(cfg: CCTConfig, epoch):
    """Target quantile ``z_tau`` for ``epoch`` under the linear tau curriculum."""
    return std_normal_quantile(tau_at(cfg, epoch))


def competitor_mask(logits, variances, k):
    """Vectorized competitor selection over rows of a ``(R, U)`` array.

    Same rule as :func:`photonvit.variance_proxy.competitor_set`. Returns the
    top-1 index per row and a boolean mask of selected competitors.
    """
    R, U = logits.shape
    rows = np.arange(R)
    order = np.argsort(-logits, axis=1, kind="stable")
    best = order[:, 0]
    by_logit = order[:, 1:]
    v = variances.copy()
    v[rows, best] = -np.inf
    by_var = np.argsort(-v, axis=1, kind="stable")[:, : U - 1]
    mask = np.zeros((R, U), dtype=bool)
    n_logit, n_var = math.ceil(k / 2), k // 2
    if n_logit:
        mask[rows[:, None], by_logit[:, :n_logit]] = True
    if n_var:
        mask[rows[:, None], by_var[:, :n_var]] = True
    size = min(k, U - 1)
    count = mask.sum(axis=1)
    for col in range(by_logit.shape[1]):
        need = count < size
        if not need.any():
            break
        idx = by_logit[:, col]
        add = need & ~mask[rows, idx]
        mask[rows[add], idx[add]] = True
        count += add
    return best, mask


class CCTResult(NamedTuple):
    loss: float
    grad_logits: np.ndarray
    grad_variances: np.ndarray
    n_terms: int


def cct_loss(logits, variances, cfg: CCTConfig, epoch=0, z_tau=None):
    """Hinge penalty ``mean_{t, j in N_K(t)} [z_tau - m_tj / sqrt(v_t,i* + v_tj)]_+``.

    ``logits`` and ``variances`` are ``(..., T, U)``; every row is one query.
    The mean runs over all hinge terms actually summed. The top-1 key and the
    competitor sets are held fixed when differentiating.
    """
    s = np.asarray(logits, dtype=np.float64)
    v = np.asarray(variances, dtype=np.float64)
    if s.shape != v.shape:
        raise ShapeError(f"logits {s.shape} and variances {v.shape} differ in shape")
    if s.shape[-1] < 2:
        raise ShapeError("need at least two keys per row")
    if np.any(v < 0):
        raise ParameterError("variances must be >= 0")
    z = tau_schedule(cfg, epoch) if z_tau is None else z_tau
    shape = s.shape
    s2 = s.reshape(-1, shape[-1])
    v2 = v.reshape(-1, shape[-1])
    rows = np.arange(s2.shape[0])
    best, mask = competitor_mask(s2, v2, cfg.k)
    s_best = s2[rows, best][:, None]
    v_best = v2[rows, best][:, None]
    margin = s_best - s2
    sigma = np.sqrt(v_best + v2 + DENOM_GUARD)
    hinge = z - margin / sigma
    active = mask & (hinge > 0)
    n_terms = int(mask.sum())
    loss = float(np.sum(np.where(active, hinge, 0.0)) / n_terms)

    # d hinge / d s_j = 1/sigma, d/d s_i* = -1/sigma, d/d v = m / (2 sigma^3)
    inv_sigma = np.where(active, 1.0 / sigma, 0.0) / n_terms
    dv_term = np.where(active, margin / (2.0 * sigma ** 3), 0.0) / n_terms
    g_s = inv_sigma.copy()
    g_s[rows, best] -= inv_sigma.sum(axis=1)
    g_v = dv_term.copy()
    g_v[rows, best] += dv_term.sum(axis=1)
    return CCTResult(loss, g_s.reshape(shape), g_v.reshape(shape), n_terms)


@dataclass
class NALNConfig:
    sigma_n_sq: float = 0.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.sigma_n_sq < 0:
            raise ParameterError(f"sigma_n_sq must be >= 0, got {self.sigma_n_sq}")
        if not (self.eps > 0):
            raise ParameterError(f"eps must be > 0, got {self.eps}")


@dataclass
class NALNCache:
    xc: np.ndarray
    inv_std: np.ndarray
    unclamped: np.ndarray
    xhat: np.ndarray
    gain: np.ndarray = field(default=None)


def naln_forward(x, sigma_n_sq=0.0, eps=1e-5, gain=None, bias=None):
    """Noise-aware layer norm over the last axis.

    ``(x - mean) / sqrt(max(var - sigma_n_sq, 0) + eps)`` with the population
    variance, followed by the optional per-channel ``gain`` and ``bias``.
    ``sigma_n_sq = 0`` is ordinary layer normalization; an array broadcasting
    against ``x[..., :1]`` gives each row its own proxy.
    Returns ``(y, cache)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ShapeError("normalized axis needs at least two channels")
    if np.any(np.asarray(sigma_n_sq) < 0) or not eps > 0:
        raise ParameterError("need sigma_n_sq >= 0 and eps > 0")
    xc = x - x.mean(axis=-1, keepdims=True)
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    corrected = var - sigma_n_sq
    unclamped = corrected > 0
    inv_std = 1.0 / np.sqrt(np.where(unclamped, corrected, 0.0) + eps)
    xhat = xc * inv_std
    y = xhat
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y, NALNCache(xc, inv_std, unclamped, xhat, gain)


def naln_backward(dy, cache: NALNCache):
    """Returns ``(dx, dgain, dbias)``; parameter gradients are summed over leading axes.

    The clamp ``max(., 0)`` passes zero gradient on its clamped side.
    """
    dy = np.asarray(dy, dtype=np.float64)
    lead = tuple(range(dy.ndim - 1))
    dbias = dy.sum(axis=lead)
    dgain = (dy * cache.xhat).sum(axis=lead)
    dxhat = dy * cache.gain if cache.gain is not None else dy
    d = dy.shape[-1]
    d_inv = np.sum(dxhat * cache.xc, axis=-1, keepdims=True)
    d_var = np.where(cache.unclamped, -0.5 * d_inv * cache.inv_std ** 3, 0.0)
    dxc = dxhat * cache.inv_std + d_var * 2.0 * cache.xc / d
    dx = dxc - dxc.mean(axis=-1, keepdims=True)
    return dx, dgain, dbias


def sigma_n_proxy_for_layer(x_sq_mean, w, params: NoiseParams):
    """Mean over output channels of the MAC error variance of a linear layer.

    ``x_sq_mean`` holds the running ``E[x_i^2]`` of the layer input and ``w``
    is its ``(K, N)`` weight; channel ``n`` contributes
    ``sum_i E[x_i^2] w_in^2 (s_laser^2 + s_fab^2 + s_thermal^2)``.
    """
    x_sq_mean = np.asarray(x_sq_mean, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w[:, None]
    if w.shape[0] != x_sq_mean.size:
        raise ShapeError(f"input statistics of width {x_sq_mean.size} do not match weight {w.shape}")
    per_channel = x_sq_mean @ (w * w) * params.total_variance
    return float(per_channel.mean())


class RunningSquareMean:
    """Accumulates ``E[x^2]`` per channel over batches."""

    def __init__(self, width):
        self.total = np.zeros(width)
        self.count = 0

    def update(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.total.size)
        self.total += np.sum(x * x, axis=0)
        self.count += x.shape[0]

    @property
    def value(self):
        return self.total / max(self.count, 1)
