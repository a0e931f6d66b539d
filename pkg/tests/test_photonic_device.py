import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photonvit.core_math import SeedContext
from photonvit.errors import ParameterError
from photonvit.noise_model import NoiseParams
from photonvit.photonic_device import (
    DELTA_MAX_NM, GAMMA_NM, DetuningPair, VariationMap, apply_jitter, build_lut, decode, detuning_for,
    encode_signed, generate_variation_map, jitter_detunings, lorentzian, normalized_shift_std,
    resonance_wavelength, sample_bank_shifts, transmission_floor,
)


@pytest.mark.parametrize("w,expected", [(0.0, (0.5, 0.5)), (1.0, (1.0, 0.0)), (-0.5, (0.25, 0.75))])
def test_encode_examples(w, expected):
    pair = encode_signed(w)
    assert (pair.w_plus, pair.w_minus) == expected


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1))
def test_encode_constant_sum_and_involution(w):
    pair = encode_signed(w)
    assert pair.w_plus + pair.w_minus == 1.0
    assert decode(pair) == pytest.approx(w, abs=2e-16)


def test_encode_out_of_range_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pair = encode_signed(1.5)
    assert caught and pair.w_plus == 1.0


def test_lorentzian_examples():
    assert lorentzian(0.0) == 1.0
    assert lorentzian(0.6) == pytest.approx(0.5, abs=1e-15)
    assert lorentzian(2.2) == pytest.approx(1.0 / (1.0 + (11.0 / 3.0) ** 2), rel=1e-14)
    assert transmission_floor() == pytest.approx(0.06923, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5))
def test_lorentzian_monotone(a, b):
    lo, hi = sorted((a, b))
    assert 0 < lorentzian(hi) <= lorentzian(lo) <= 1


def test_detuning_examples():
    assert detuning_for(1.0).delta_nm == 0.0
    assert detuning_for(0.5).delta_nm == pytest.approx(0.6, abs=1e-15)
    d = detuning_for(0.05)
    assert d.clamped and d.delta_nm == DELTA_MAX_NM
    assert d.transmission == pytest.approx(lorentzian(DELTA_MAX_NM))
    assert (GAMMA_NM / 2) * math.sqrt(1 / 0.05 - 1) == pytest.approx(2.615, abs=1e-3)
    with pytest.raises(ParameterError):
        detuning_for(0.0)


def test_lorentzian_inverse_residual_on_unclamped_range():
    levels = np.linspace(transmission_floor() + 1e-9, 1.0, 20_001)
    worst = max(abs(lorentzian(detuning_for(float(t)).delta_nm) - t) for t in levels[::20])
    assert worst <= 1e-12


def test_lut_shape_and_step():
    lut = build_lut(4)
    assert len(lut) == 16 and lut.step == pytest.approx(1 / 15)
    assert np.allclose(lut.level(np.arange(16)), np.arange(16) / 15)
    with pytest.raises(ParameterError):
        build_lut(5)


@pytest.mark.parametrize("bits", [4, 8, 32])
def test_lut_decode_error_bound(bits):
    lut = build_lut(bits)
    w = np.linspace(-1, 1, 4001)
    dp, dm = lut.encode(w)
    err = np.abs(lut.decode(dp, dm) - w)
    assert err.max() <= 1.0 / (2 ** bits - 1) + 1e-12
    if bits == 32:
        assert err.max() <= 1e-9


@pytest.mark.parametrize("bits", [4, 8])
def test_lut_entries_keep_constant_sum(bits):
    lut = build_lut(bits)
    for i in range(len(lut)):
        e = lut.entry(i)
        total = lut.detuning_to_level(e.delta_plus_nm) + lut.detuning_to_level(e.delta_minus_nm)
        assert abs(total - 1.0) <= lut.step


def test_round_trip_at_8_bits_with_zero_jitter():
    lut = build_lut(8)
    pair = lut.encode_pair(0.37)
    same = apply_jitter(pair, NoiseParams.post_trim(0.0), SeedContext(0))
    assert same == pair
    assert abs(lut.decode_pair(same) - 0.37) <= 1 / 255


def test_jitter_bias_and_moments():
    pair = DetuningPair(0.0, 1.0)
    biased = apply_jitter(pair, NoiseParams.post_trim(0.0, 32.0), SeedContext(0))
    assert biased.delta_plus_nm == pytest.approx(0.032)
    assert biased.delta_minus_nm == pytest.approx(1.032)
    base = np.full(100_000, 1.0)
    dp, _ = jitter_detunings(base, base, NoiseParams.post_trim(32.0, 5.0), SeedContext(1))
    shifts = dp - base
    assert shifts.mean() == pytest.approx(0.005, abs=4 * 0.032 / math.sqrt(shifts.size))
    assert shifts.std() == pytest.approx(0.032, rel=0.02)


def test_jitter_reclamps():
    d = np.array([0.0, DELTA_MAX_NM])
    dp, dm = jitter_detunings(d, d, NoiseParams.post_trim(100.0), SeedContext(2))
    for arr in (dp, dm):
        assert np.all((arr >= 0) & (arr <= DELTA_MAX_NM))


def test_variation_map_zero_amplitude():
    vmap = generate_variation_map(SeedContext(0), 2, 2, 0.1, 1.0, 0.0)
    assert np.array_equal(vmap.grid, np.zeros((20, 20)))
    banks = sample_bank_shifts(vmap, SeedContext(1))
    assert np.array_equal(banks.shifts, np.zeros((100, 15)))


def test_variation_map_statistics():
    # many small fields: marginal std and correlation at one correlation length
    cell, l_w, amp = 0.1, 0.5, 0.96
    lag = int(round(l_w / cell))
    var, cov = [], []
    for i in range(200):
        g = generate_variation_map(SeedContext(4).child("field", i), 3.0, 3.0, cell, l_w, amp).grid
        var.append(np.mean(g * g))
        cov.append(np.mean(g[:, :-lag] * g[:, lag:]))
    var, cov = np.mean(var), np.mean(cov)
    assert math.sqrt(var) == pytest.approx(amp, rel=0.03)
    assert cov / var == pytest.approx(math.exp(-0.5), abs=0.03)


def test_default_map_geometry():
    vmap = generate_variation_map(SeedContext(0))
    assert vmap.grid.shape == (200, 200)
    assert vmap.correlation_length_mm == 1.0


def test_bank_samples_contract():
    vmap = generate_variation_map(SeedContext(3), 2, 2, 0.05, 1.0, 0.96)
    banks = sample_bank_shifts(vmap, SeedContext(4), 15, 100)
    assert banks.shifts.shape == (100, 15) and banks.locations.shape == (100, 2)
    for s, (r, c), sig in zip(banks.shifts, banks.locations, banks.sigma_b):
        assert np.array_equal(s, vmap.grid[r, c:c + 15])
        assert sig == pytest.approx(np.std(s, ddof=1), rel=1e-12)
    with pytest.raises(ParameterError):
        sample_bank_shifts(VariationMap(np.zeros((3, 3)), 0.1, 1.0, 0.0), SeedContext(0))


def test_resonance_wavelength():
    assert resonance_wavelength(2.5, 0.62 * 100, 100) == pytest.approx(1550.0)
    assert resonance_wavelength(2.4, 30.0, 40) == pytest.approx(2 * resonance_wavelength(2.4, 30.0, 80))
    rng = np.random.default_rng(0)
    for n_eff, length, m in zip(rng.uniform(2, 4, 10), rng.uniform(5, 50, 10), rng.integers(10, 100, 10)):
        assert resonance_wavelength(n_eff, length, int(m)) == pytest.approx(n_eff * length * 1000 / m)
    with pytest.raises(ParameterError):
        resonance_wavelength(2.4, 30, 0)
    assert normalized_shift_std([0.12, -0.12]) == pytest.approx(0.1)
