"""Tiled, noisy emulation of matrix products on the WDM microring cores.

A ``K x N`` weight matrix is cut into tiles of ``wavelengths`` rows by ``arms``
columns. Every tile is programmed into one core; each input row is split into
``wavelengths``-long segments that are launched through the matching tiles,
and the per-tile partial sums are accumulated electronically.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, astuple, dataclass, field

import numpy as np

from .core_math import SeedContext
from .errors import ParameterError, ShapeError
from .noise_model import LaserMode, NoiseParams, Regime, draw_noise
from .photonic_device import DELTA_MAX_NM, GAMMA_NM, build_lut, lorentzian


@dataclass(frozen=True)
class CoreGeometry:
    arms: int = 64
    rings_per_arm: int = 32
    wavelengths: int = 32
    cores: int = 5

    def __post_init__(self):
        if min(self.arms, self.rings_per_arm, self.wavelengths, self.cores) <= 0:
            raise ParameterError(f"core geometry must be positive: {self}")
        if self.wavelengths > self.rings_per_arm:
            raise ParameterError("wavelengths cannot exceed rings per arm")


@dataclass(frozen=True)
class Tile:
    row_tile: int
    col_tile: int
    k_start: int
    k_stop: int
    n_start: int
    n_stop: int
    cycle: int
    core: int

    @property
    def index(self):
        return (self.row_tile, self.col_tile)


@dataclass(frozen=True)
class TileSchedule:
    m: int
    k: int
    n: int
    geometry: CoreGeometry
    row_tiles: int
    col_tiles: int
    cycles_per_row: int
    tiles: tuple = field(repr=False)

    @property
    def cycles_total(self):
        return self.m * self.cycles_per_row

    @property
    def n_tiles(self):
        return len(self.tiles)

    def to_json(self):
        payload = {
            "m": self.m, "k": self.k, "n": self.n,
            "geometry": asdict(self.geometry),
            "row_tiles": self.row_tiles, "col_tiles": self.col_tiles,
            "cycles_per_row": self.cycles_per_row, "cycles_total": self.cycles_total,
            "tiles": [asdict(t) for t in self.tiles],
        }
        return json.dumps(payload, indent=2)


def build_schedule(m, k, n, geom: CoreGeometry = CoreGeometry()) -> TileSchedule:
    """Split a ``(m x k) @ (k x n)`` product into core-sized tiles.

    Tiles are enumerated row-tile major and dealt round-robin to
    ``min(col_tiles, cores)`` cores, so with few column tiles every core keeps
    a fixed column block. ``cycle`` is the slot within one input row.
    """
    if min(m, k, n) <= 0:
        raise ParameterError(f"dimensions must be positive, got {(m, k, n)}")
    row_tiles = math.ceil(k / geom.wavelengths)
    col_tiles = math.ceil(n / geom.arms)
    active = min(col_tiles, geom.cores)
    tiles = []
    for r in range(row_tiles):
        for c in range(col_tiles):
            t = r * col_tiles + c
            tiles.append(Tile(r, c,
                              r * geom.wavelengths, min(k, (r + 1) * geom.wavelengths),
                              c * geom.arms, min(n, (c + 1) * geom.arms),
                              cycle=t // active, core=t % active))
    cycles = math.ceil(row_tiles * col_tiles / active)
    return TileSchedule(m, k, n, geom, row_tiles, col_tiles, cycles, tuple(tiles))


@dataclass(frozen=True)
class ConversionCounts:
    """Event counts of one product; the counting rules are:

    * ``optical_cycles``: ``m * cycles_per_row``
    * ``dac_ops``: one conversion per input element per tile it enters
    * ``vcsel_activations``: one multi-wavelength burst per input row per tile
    * ``bpd_reads``: every arm of every tile fires once per input row
    * ``adc_reads``: every output element is digitized once per row tile
    * ``tuning_events``: two rings programmed per weight, once per product
    * ``memory_accesses``: shared-buffer traffic; each input element is read
      once and broadcast to every core, weights read once, outputs written once
    * ``electronic_ops``: additions accumulating row-tile partials
    """

    optical_cycles: int = 0
    dac_ops: int = 0
    vcsel_activations: int = 0
    bpd_reads: int = 0
    adc_reads: int = 0
    tuning_events: int = 0
    memory_accesses: int = 0
    electronic_ops: int = 0

    def __add__(self, other):
        return ConversionCounts(*(a + b for a, b in zip(astuple(self), astuple(other))))

    def scaled(self, factor):
        return ConversionCounts(*(v * factor for v in astuple(self)))

    def as_dict(self):
        return asdict(self)


def cycles_and_conversions(schedule: TileSchedule, m=None) -> ConversionCounts:
    m = schedule.m if m is None else m
    k, n = schedule.k, schedule.n
    return ConversionCounts(
        optical_cycles=m * schedule.cycles_per_row,
        dac_ops=m * k * schedule.col_tiles,
        vcsel_activations=m * schedule.n_tiles,
        bpd_reads=m * schedule.n_tiles * schedule.geometry.arms,
        adc_reads=m * n * schedule.row_tiles,
        tuning_events=2 * k * n,
        memory_accesses=m * k + k * n + m * n,
        electronic_ops=m * n * (schedule.row_tiles - 1),
    )


def _as_batched(a, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None], False
    if arr.ndim == 3:
        return arr, True
    raise ShapeError(f"{name} must be 2-D or 3-D, got shape {arr.shape}")


def noisy_matmul(x, w, geom: CoreGeometry = CoreGeometry(), params: NoiseParams = None,
                 lut_bits=32, ctx: SeedContext = None, pass_index=0, *,
                 weight_noise=True, input_noise=True, independent_batch=False,
                 noise_on_padding=False, gamma_nm=GAMMA_NM, delta_max_nm=DELTA_MAX_NM):
    """Emulate ``x @ w`` on the optical cores.

    ``x`` is ``(M, K)`` or batched ``(B, M, K)``; ``w`` is ``(K, N)`` (shared) or
    ``(B, K, N)``. Per tile the signed weights are scaled to ``[-1, 1]``,
    differentially encoded, quantized through the detuning LUT, jittered
    (post-trim), read back through the Lorentzian and perturbed by
    ``(1 + eps + eta)``; inputs are scaled by ``(1 + zeta)``. The ``+`` and
    ``-`` arms are summed separately and differenced as in a balanced
    photodetector.

    ``ctx`` addresses this layer on one chip. Noise for tile ``t`` is drawn
    from ``ctx/tile<t>`` so results do not depend on evaluation order. With
    ``independent_batch`` every batch entry behaves as a separate chip.

    Returns ``(y, schedule)``.
    """
    params = NoiseParams.noiseless() if params is None else params
    ctx = SeedContext(0) if ctx is None else ctx
    xb, x_batched = _as_batched(x, "x")
    wb, w_batched = _as_batched(w, "w")
    if xb.shape[-1] != wb.shape[-2]:
        raise ShapeError(f"cannot multiply {np.shape(x)} by {np.shape(w)}")
    if w_batched and x_batched and wb.shape[0] != xb.shape[0]:
        raise ShapeError(f"batch sizes differ: {xb.shape[0]} vs {wb.shape[0]}")
    B = max(xb.shape[0], wb.shape[0])
    M, K = xb.shape[1], xb.shape[2]
    N = wb.shape[2]
    schedule = build_schedule(M, K, N, geom)
    lut = build_lut(lut_bits, gamma_nm, delta_max_nm)
    post_trim = params.regime is Regime.POST_TRIM and (params.jitter_std_pm > 0 or params.jitter_bias_pm != 0)
    global_laser = params.laser_mode is LaserMode.GLOBAL

    y = np.zeros((B, M, N))
    for tile in schedule.tiles:
        k0, k1, n0, n1 = tile.k_start, tile.k_stop, tile.n_start, tile.n_stop
        kl, nl = k1 - k0, n1 - n0
        wt = wb[:, k0:k1, n0:n1]
        xt = xb[:, :, k0:k1]
        scale = np.max(np.abs(wt), axis=(1, 2), keepdims=True)
        scale = np.where(scale > 0, scale, 1.0)
        dp, dm = lut.encode(wt / scale)

        lead = (B,) if independent_batch else ()
        full = (geom.wavelengths, geom.arms) if noise_on_padding else (kl, nl)
        in_full = geom.wavelengths if noise_on_padding else kl
        in_shape = (B, M, 1) if global_laser else (B, M, in_full)
        tctx = ctx.child("tile", tile.row_tile * schedule.col_tiles + tile.col_tile)
        draw = draw_noise(params, tctx, lead + full, in_shape, pass_index)

        if post_trim:
            mu = params.jitter_bias_pm * 1e-3
            sd = params.jitter_std_pm * 1e-3
            shifts = mu + sd * tctx.child("jitter").generator().standard_normal((2,) + lead + full)
            shifts = shifts[..., :kl, :nl]
            dp = np.clip(dp + shifts[0], 0.0, delta_max_nm)
            dm = np.clip(dm + shifts[1], 0.0, delta_max_nm)

        t_plus = lorentzian(dp, gamma_nm)
        t_minus = lorentzian(dm, gamma_nm)
        if weight_noise:
            mult = draw.weight_multiplier[..., :kl, :nl]
            t_plus = t_plus * mult
            t_minus = t_minus * mult
        x_in = xt
        if input_noise:
            zeta = draw.input_multiplier if global_laser else draw.input_multiplier[..., :kl]
            x_in = xt * zeta
        bpd = np.matmul(x_in, t_plus) - np.matmul(x_in, t_minus)
        y[:, :, n0:n1] += bpd * (scale / (1.0 - lut.t_min))

    if not (x_batched or w_batched):
        y = y[0]
    return y, schedule


def relative_error(y, ref):
    """``max|y - ref| / max|ref|``, the norm used for noiseless-equivalence checks."""
    denom = float(np.max(np.abs(ref)))
    err = float(np.max(np.abs(np.asarray(y) - ref)))
    return err / denom if denom > 0 else err
