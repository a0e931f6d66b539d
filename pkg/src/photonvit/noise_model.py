"""Multiplicative noise sources of a microring weight bank.

Three sources perturb an optical MAC ``y = sum_i x_i w_i``:

* fabrication mismatch, ``w_i -> w_i (1 + eps_i)``, frozen per chip;
* thermal crosstalk, ``w_i -> w_i (1 + eps_i + eta_i)``, redrawn every forward pass;
* laser intensity fluctuation, ``x_i -> x_i (1 + zeta)``, redrawn every input cycle.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .core_math import SeedContext, gauss
from .errors import ParameterError

DEFAULT_LINEWIDTH_NM = 1.2


class Regime(str, enum.Enum):
    PRE_TRIM = "pre_trim"
    POST_TRIM = "post_trim"


class LaserMode(str, enum.Enum):
    CHANNEL = "channel"
    GLOBAL = "global"


@dataclass(frozen=True)
class NoiseParams:
    """Noise configuration.

    In the pre-trim regime fabrication noise enters as the multiplicative
    ``eps`` with std ``sigma_fab``. In the post-trim regime it is realized
    physically, as Gaussian detuning jitter ``N(jitter_bias_pm, jitter_std_pm^2)``
    added to every ring, and no separate ``eps`` is drawn.
    """

    sigma_fab: float = 0.8
    sigma_thermal: float = 0.1
    sigma_laser: float = 0.05
    regime: Regime = Regime.PRE_TRIM
    jitter_std_pm: float = 32.0
    jitter_bias_pm: float = 0.0
    linewidth_nm: float = DEFAULT_LINEWIDTH_NM
    laser_mode: LaserMode = LaserMode.CHANNEL

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        object.__setattr__(self, "laser_mode", LaserMode(self.laser_mode))
        for name in ("sigma_fab", "sigma_thermal", "sigma_laser", "jitter_std_pm"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ParameterError(f"{name} must be a finite value >= 0, got {value}")
        if not (self.linewidth_nm > 0):
            raise ParameterError(f"linewidth_nm must be > 0, got {self.linewidth_nm}")
        if self.regime is Regime.POST_TRIM and not (0 <= self.jitter_std_pm <= 100):
            raise ParameterError(f"post-trim jitter_std_pm must lie in [0, 100], got {self.jitter_std_pm}")

    @classmethod
    def pre_trim(cls, sigma_fab=0.8, sigma_thermal=0.1, sigma_laser=0.05, **kw):
        return cls(sigma_fab=sigma_fab, sigma_thermal=sigma_thermal,
                   sigma_laser=sigma_laser, regime=Regime.PRE_TRIM, **kw)

    @classmethod
    def post_trim(cls, jitter_std_pm=32.0, jitter_bias_pm=0.0, sigma_thermal=0.1,
                  sigma_laser=0.05, linewidth_nm=DEFAULT_LINEWIDTH_NM, **kw):
        return cls(sigma_fab=sigma_fab_from_jitter(jitter_std_pm, linewidth_nm),
                   sigma_thermal=sigma_thermal, sigma_laser=sigma_laser,
                   regime=Regime.POST_TRIM, jitter_std_pm=jitter_std_pm,
                   jitter_bias_pm=jitter_bias_pm, linewidth_nm=linewidth_nm, **kw)

    @classmethod
    def noiseless(cls):
        return cls(sigma_fab=0.0, sigma_thermal=0.0, sigma_laser=0.0, jitter_std_pm=0.0)

    def with_sigma_fab(self, sigma_fab):
        return replace(self, sigma_fab=sigma_fab)

    @property
    def effective_sigma_fab(self):
        if self.regime is Regime.POST_TRIM:
            return sigma_fab_from_jitter(self.jitter_std_pm, self.linewidth_nm)
        return self.sigma_fab

    @property
    def multiplicative_sigma_fab(self):
        """Std of the drawn ``eps`` multipliers (zero post-trim, see class doc)."""
        return self.sigma_fab if self.regime is Regime.PRE_TRIM else 0.0

    @property
    def total_variance(self):
        """Per-term relative variance ``sigma_laser^2 + sigma_fab^2 + sigma_thermal^2``."""
        return self.sigma_laser ** 2 + self.effective_sigma_fab ** 2 + self.sigma_thermal ** 2

    @property
    def is_noiseless(self):
        jitter_off = self.regime is Regime.PRE_TRIM or (self.jitter_std_pm == 0 and self.jitter_bias_pm == 0)
        return jitter_off and self.multiplicative_sigma_fab == 0 and self.sigma_thermal == 0 and self.sigma_laser == 0


def sigma_fab_from_jitter(sigma_lambda_pm, linewidth_nm=DEFAULT_LINEWIDTH_NM):
    """Normalized resonance spread ``sigma_lambda / FWHM`` (pm over nm)."""
    if not (linewidth_nm > 0):
        raise ParameterError(f"linewidth_nm must be > 0, got {linewidth_nm}")
    return (sigma_lambda_pm * 1e-3) / linewidth_nm


@dataclass(frozen=True)
class NoiseDraw:
    eps: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray
    provenance: str

    @property
    def weight_multiplier(self):
        return 1.0 + self.eps + self.eta

    @property
    def input_multiplier(self):
        return 1.0 + self.zeta


def draw_noise(params: NoiseParams, ctx: SeedContext, weight_shape, input_shape, pass_index=0):
    """Draw one set of multipliers for a weight block and its inputs.

    ``ctx`` addresses a chip/layer; ``eps`` comes from its ``fab`` child and is
    therefore identical across passes, while ``eta`` and ``zeta`` are keyed by
    ``pass_index``.
    """
    weight_shape = tuple(weight_shape)
    input_shape = tuple(input_shape)
    if any(s <= 0 for s in weight_shape + input_shape):
        raise ParameterError(f"shapes must be positive, got {weight_shape} and {input_shape}")
    pass_ctx = ctx.child("pass", pass_index)
    eps = gauss(ctx.child("fab"), weight_shape, 0.0, params.multiplicative_sigma_fab)
    eta = gauss(pass_ctx.child("thermal"), weight_shape, 0.0, params.sigma_thermal)
    zeta = gauss(pass_ctx.child("laser"), input_shape, 0.0, params.sigma_laser)
    return NoiseDraw(eps=eps, eta=eta, zeta=zeta, provenance=pass_ctx.path_str())


def mac_variance(x, w, params: NoiseParams):
    """Closed-form variance of the MAC error and its relative std.

    Returns ``(var, rel_std)`` where ``var = sum x_i^2 w_i^2 (s_laser^2 + s_fab^2 + s_thermal^2)``
    and ``rel_std = sqrt(var) / |sum x_i w_i|``; ``rel_std`` is ``nan`` when the
    clean dot product is zero.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    w = np.asarray(w, dtype=np.float64).ravel()
    if x.shape != w.shape:
        raise ParameterError(f"x and w must have equal length, got {x.size} and {w.size}")
    var = float(np.sum((x * w) ** 2) * params.total_variance)
    y = float(np.dot(x, w))
    rel = math.sqrt(var) / abs(y) if y != 0 else math.nan
    return var, rel
