"""Microring device model: differential weights, Lorentzian tuning, LUTs, jitter
and chip-scale process variation.

A signed weight ``w_s`` in ``[-1, 1]`` is carried by two rings with levels
``w+ = (w_s + 1)/2`` and ``w- = (1 - w_s)/2``. A level is realized as a ring
transmission inside the achievable window ``[L(delta_max), 1]``::

    T(level) = T_min + (1 - T_min) * level,   T_min = L(delta_max)

so every level in ``[0, 1]`` has a detuning within ``[0, delta_max]`` and the
clamp only engages when jitter pushes a ring outside the window. The
balanced photodetector reads ``T+ - T-``, which electronics rescale by
``1 / (1 - T_min)``.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core_math import SeedContext
from .errors import ParameterError
from .noise_model import NoiseParams

GAMMA_NM = 1.2
DELTA_MAX_NM = 2.2
SUPPORTED_LUT_BITS = (4, 8, 32)


@dataclass(frozen=True)
class DifferentialWeight:
    w_plus: float
    w_minus: float

    @property
    def signed(self):
        return self.w_plus - self.w_minus


@dataclass(frozen=True)
class DetuningPair:
    delta_plus_nm: float
    delta_minus_nm: float


class Detuning(NamedTuple):
    delta_nm: float
    transmission: float
    clamped: bool


def encode_signed(w_s):
    """Balanced differential encoding of one signed weight."""
    if abs(w_s) > 1:
        warnings.warn(f"signed weight {w_s} outside [-1, 1]; clamped", RuntimeWarning, stacklevel=2)
        w_s = max(-1.0, min(1.0, w_s))
    w_plus = (w_s + 1.0) / 2.0
    return DifferentialWeight(w_plus, 1.0 - w_plus)


def decode(pair: DifferentialWeight):
    return pair.signed


def lorentzian(delta_nm, gamma_nm=GAMMA_NM):
    """Ring transmission ``1 / (1 + (2 delta / gamma)^2)``."""
    r = 2.0 * np.asarray(delta_nm, dtype=np.float64) / gamma_nm
    out = 1.0 / (1.0 + r * r)
    return float(out) if out.ndim == 0 else out


def _raw_detuning(level, gamma_nm):
    return (gamma_nm / 2.0) * np.sqrt(1.0 / level - 1.0)


def detuning_for(level, gamma_nm=GAMMA_NM, delta_max_nm=DELTA_MAX_NM):
    """Inverse Lorentzian; clamps at ``delta_max_nm`` and reports the transmission achieved."""
    if not (0 < level <= 1):
        raise ParameterError(f"transmission level must lie in (0, 1], got {level}")
    delta = float(_raw_detuning(level, gamma_nm))
    if delta > delta_max_nm:
        return Detuning(delta_max_nm, lorentzian(delta_max_nm, gamma_nm), True)
    return Detuning(delta, level, False)


def transmission_floor(gamma_nm=GAMMA_NM, delta_max_nm=DELTA_MAX_NM):
    return lorentzian(delta_max_nm, gamma_nm)


class DetuningLUT:
    """Uniform ``2**bits`` level grid on ``[0, 1]`` with its detuning pairs.

    Entry ``i`` holds level ``i / (2**bits - 1)`` for the ``+`` ring and the
    complementary level for the ``-`` ring. Entries are computed on demand
    so the 32-bit table never has to be materialized.
    """

    def __init__(self, bits, gamma_nm=GAMMA_NM, delta_max_nm=DELTA_MAX_NM):
        if bits not in SUPPORTED_LUT_BITS:
            raise ParameterError(f"LUT bits must be one of {SUPPORTED_LUT_BITS}, got {bits}")
        self.bits = bits
        self.gamma_nm = gamma_nm
        self.delta_max_nm = delta_max_nm
        self.n_levels = 2 ** bits
        self.step = 1.0 / (self.n_levels - 1)
        self.t_min = transmission_floor(gamma_nm, delta_max_nm)

    def __len__(self):
        return self.n_levels

    def quantize_index(self, level):
        idx = np.rint(np.clip(level, 0.0, 1.0) * (self.n_levels - 1))
        return idx.astype(np.int64)

    def level(self, index):
        return np.asarray(index, dtype=np.float64) * self.step

    def level_to_transmission(self, level):
        return self.t_min + (1.0 - self.t_min) * np.asarray(level, dtype=np.float64)

    def transmission_to_level(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t_min) / (1.0 - self.t_min)

    def level_to_detuning(self, level):
        t = self.level_to_transmission(level)
        return np.minimum(_raw_detuning(t, self.gamma_nm), self.delta_max_nm)

    def detuning_to_level(self, delta_nm):
        return self.transmission_to_level(lorentzian(delta_nm, self.gamma_nm))

    def entry(self, index):
        lv = float(self.level(index))
        return DetuningPair(float(self.level_to_detuning(lv)), float(self.level_to_detuning(1.0 - lv)))

    def encode(self, w_s):
        """Quantized detunings ``(delta+, delta-)`` for signed weights (array-valued)."""
        w_s = np.clip(np.asarray(w_s, dtype=np.float64), -1.0, 1.0)
        lv_plus = self.level(self.quantize_index((w_s + 1.0) / 2.0))
        lv_minus = 1.0 - lv_plus
        return self.level_to_detuning(lv_plus), self.level_to_detuning(lv_minus)

    def decode(self, delta_plus_nm, delta_minus_nm):
        """Signed weight read back from a pair of detunings."""
        return self.detuning_to_level(delta_plus_nm) - self.detuning_to_level(delta_minus_nm)

    def encode_pair(self, w_s) -> DetuningPair:
        dp, dm = self.encode(w_s)
        return DetuningPair(float(dp), float(dm))

    def decode_pair(self, pair: DetuningPair):
        return float(self.decode(pair.delta_plus_nm, pair.delta_minus_nm))

    def to_csv(self, path):
        if self.bits > 16:
            raise ParameterError(f"refusing to export a {self.n_levels}-entry table")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["level", "delta_plus_nm", "delta_minus_nm"])
            for i in range(self.n_levels):
                e = self.entry(i)
                writer.writerow([f"{float(self.level(i)):.17g}", f"{e.delta_plus_nm:.17g}",
                                 f"{e.delta_minus_nm:.17g}"])


def build_lut(bits, gamma_nm=GAMMA_NM, delta_max_nm=DELTA_MAX_NM):
    return DetuningLUT(bits, gamma_nm, delta_max_nm)


def jitter_detunings(delta_plus_nm, delta_minus_nm, params: NoiseParams, ctx: SeedContext,
                     delta_max_nm=DELTA_MAX_NM):
    """Add independent ``N(mu_r, sigma_lambda^2)`` shifts to every ring and re-clamp."""
    dp = np.asarray(delta_plus_nm, dtype=np.float64)
    dm = np.asarray(delta_minus_nm, dtype=np.float64)
    mu = params.jitter_bias_pm * 1e-3
    sd = params.jitter_std_pm * 1e-3
    if sd == 0 and mu == 0:
        return dp, dm
    rng = ctx.generator()
    shifts = mu + sd * rng.standard_normal((2,) + dp.shape)
    return (np.clip(dp + shifts[0], 0.0, delta_max_nm),
            np.clip(dm + shifts[1], 0.0, delta_max_nm))


def apply_jitter(pair: DetuningPair, params: NoiseParams, ctx: SeedContext,
                 delta_max_nm=DELTA_MAX_NM) -> DetuningPair:
    dp, dm = jitter_detunings(pair.delta_plus_nm, pair.delta_minus_nm, params, ctx, delta_max_nm)
    return DetuningPair(float(dp), float(dm))


@dataclass(frozen=True)
class VariationMap:
    grid: np.ndarray
    cell_size_mm: float
    correlation_length_mm: float
    amplitude_nm: float

    def to_csv(self, path):
        np.savetxt(path, self.grid, delimiter=",", fmt="%.17g")


def _se_factor(n, cell_mm, l_mm):
    # symmetric square root of the 1-D squared-exponential correlation matrix
    pos = np.arange(n) * cell_mm
    corr = np.exp(-((pos[:, None] - pos[None, :]) ** 2) / (2.0 * l_mm ** 2))
    vals, vecs = np.linalg.eigh(corr)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def generate_variation_map(ctx: SeedContext, width_mm=10.0, height_mm=10.0, cell_mm=0.05,
                           l_w_mm=1.0, amplitude_nm=0.96) -> VariationMap:
    """Zero-mean Gaussian field of resonance shifts with covariance
    ``amplitude^2 * exp(-r^2 / (2 l_w^2))``.

    The squared-exponential kernel factorizes over x and y, so the field is
    ``A_y Z A_x`` with white noise ``Z`` and exact 1-D square-root factors.
    """
    if not (l_w_mm > 0):
        raise ParameterError(f"correlation length must be > 0, got {l_w_mm}")
    if not (cell_mm > 0) or width_mm <= 0 or height_mm <= 0:
        raise ParameterError("map dimensions must be positive")
    if amplitude_nm < 0:
        raise ParameterError(f"amplitude must be >= 0, got {amplitude_nm}")
    nx = max(1, int(round(width_mm / cell_mm)))
    ny = max(1, int(round(height_mm / cell_mm)))
    if amplitude_nm == 0:
        grid = np.zeros((ny, nx))
    else:
        z = ctx.generator().standard_normal((ny, nx))
        grid = amplitude_nm * (_se_factor(ny, cell_mm, l_w_mm) @ z @ _se_factor(nx, cell_mm, l_w_mm))
    return VariationMap(grid, cell_mm, l_w_mm, amplitude_nm)


@dataclass(frozen=True)
class BankSample:
    shifts: np.ndarray
    locations: np.ndarray
    sigma_b: np.ndarray


def sample_bank_shifts(vmap: VariationMap, ctx: SeedContext, n_rings=15, placements=100) -> BankSample:
    """Drop a row of ``n_rings`` adjacent rings at random map locations.

    Returns the per-ring shifts ``(placements, n_rings)``, the top-left cell of
    every placement and each bank's sample std (``ddof=1``).
    """
    ny, nx = vmap.grid.shape
    if n_rings > nx:
        raise ParameterError(f"bank of {n_rings} rings does not fit a {nx}-cell wide map")
    rng = ctx.generator()
    rows = rng.integers(0, ny, size=placements)
    cols = rng.integers(0, nx - n_rings + 1, size=placements)
    idx = cols[:, None] + np.arange(n_rings)[None, :]
    shifts = vmap.grid[rows[:, None], idx]
    sigma_b = shifts.std(axis=1, ddof=1) if n_rings > 1 else np.zeros(placements)
    return BankSample(shifts, np.stack([rows, cols], axis=1), sigma_b)


def resonance_wavelength(n_eff, ring_length_um, mode_order):
    """``lambda_res = n_eff * L / m`` in nanometers."""
    if mode_order <= 0:
        raise ParameterError(f"mode order must be positive, got {mode_order}")
    return n_eff * ring_length_um * 1e3 / mode_order


def normalized_shift_std(shifts_nm, gamma_nm=GAMMA_NM):
    return float(np.std(shifts_nm)) / gamma_nm

