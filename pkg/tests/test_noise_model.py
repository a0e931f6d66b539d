import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photonvit.core_math import SeedContext
from photonvit.errors import ParameterError
from photonvit.noise_model import (
    LaserMode, NoiseParams, Regime, draw_noise, mac_variance, sigma_fab_from_jitter,
)

SIGMAS = NoiseParams.pre_trim(0.1, 0.1, 0.05)


def test_defaults():
    p = NoiseParams()
    assert p.regime is Regime.PRE_TRIM and p.sigma_fab == 0.8
    assert (p.sigma_thermal, p.sigma_laser) == (0.1, 0.05)
    q = NoiseParams.post_trim()
    assert q.jitter_std_pm == 32.0 and q.jitter_bias_pm == 0.0
    assert q.multiplicative_sigma_fab == 0.0
    assert q.effective_sigma_fab == pytest.approx(0.032 / 1.2)


@pytest.mark.parametrize("pm,nm,expected", [(1200, 1.2, 1.0), (100, 1.2, 0.0833333), (32, 1.2, 0.0266667)])
def test_sigma_fab_from_jitter(pm, nm, expected):
    assert sigma_fab_from_jitter(pm, nm) == pytest.approx(expected, rel=1e-5)


def test_parameter_validation():
    with pytest.raises(ParameterError):
        NoiseParams(sigma_fab=-0.1)
    with pytest.raises(ParameterError):
        NoiseParams(sigma_laser=float("inf"))
    with pytest.raises(ParameterError):
        NoiseParams.post_trim(jitter_std_pm=150)
    with pytest.raises(ParameterError):
        sigma_fab_from_jitter(10, 0)
    with pytest.raises(ValueError):
        NoiseParams(regime="sideways")


def test_noiseless_multipliers_are_one():
    d = draw_noise(NoiseParams.noiseless(), SeedContext(1), (4, 5), (3, 4))
    assert np.array_equal(d.weight_multiplier, np.ones((4, 5)))
    assert np.array_equal(d.input_multiplier, np.ones((3, 4)))
    assert NoiseParams.noiseless().is_noiseless


def test_stream_contract():
    ctx = SeedContext(5).child("chip", 2)
    a = draw_noise(NoiseParams(), ctx, (8, 8), (2, 8), pass_index=0)
    b = draw_noise(NoiseParams(), ctx, (8, 8), (2, 8), pass_index=1)
    assert np.array_equal(a.eps, b.eps)
    assert not np.array_equal(a.eta, b.eta)
    assert not np.array_equal(a.zeta, b.zeta)
    again = draw_noise(NoiseParams(), ctx, (8, 8), (2, 8), pass_index=1)
    assert np.array_equal(b.eta, again.eta)
    assert "pass1" in b.provenance


def test_sample_std_within_two_percent():
    p = NoiseParams.pre_trim(0.4, 0.1, 0.05)
    d = draw_noise(p, SeedContext(9), (100_000,), (100_000,))
    assert d.eps.std() == pytest.approx(0.4, rel=0.02)
    assert d.eta.std() == pytest.approx(0.1, rel=0.02)
    assert d.zeta.std() == pytest.approx(0.05, rel=0.02)
    for arr, s in ((d.eps, 0.4), (d.eta, 0.1), (d.zeta, 0.05)):
        assert abs(arr.mean()) < 4 * s / math.sqrt(arr.size)


def test_draw_noise_rejects_empty_shapes():
    with pytest.raises(ParameterError):
        draw_noise(NoiseParams(), SeedContext(0), (0, 3), (1, 3))


def test_mac_variance_examples():
    var, rel = mac_variance([1.0], [1.0], SIGMAS)
    assert var == pytest.approx(0.0225, abs=1e-15)
    assert rel == pytest.approx(0.15, abs=1e-14)
    var, rel = mac_variance([1.0, 1.0], [1.0, -1.0], SIGMAS)
    assert var == pytest.approx(2 * 0.0225, abs=1e-15)
    assert math.isnan(rel)
    with pytest.raises(ParameterError):
        mac_variance([1.0, 2.0], [1.0], SIGMAS)


def test_mac_variance_monte_carlo_length_8():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(8)
    w = rng.standard_normal(8)
    trials = 100_000
    d = draw_noise(SIGMAS, SeedContext(3), (trials, 8), (trials, 8))
    err = np.sum(x * d.input_multiplier * w * d.weight_multiplier, axis=1) - x @ w
    var, _ = mac_variance(x, w, SIGMAS)
    # the (1+zeta)(1+eps+eta) product adds a small cross term, well inside 3%
    assert err.var() == pytest.approx(var, rel=0.03)


vectors = st.lists(st.floats(-3, 3, allow_nan=False), min_size=1, max_size=12)


@settings(max_examples=50, deadline=None)
@given(vectors, st.randoms(use_true_random=False), st.floats(0.1, 10))
def test_mac_variance_properties(xs, rnd, c):
    x = np.array(xs)
    w = np.array([rnd.uniform(-2, 2) for _ in xs])
    var, rel = mac_variance(x, w, SIGMAS)
    perm = np.array(rnd.sample(range(len(xs)), len(xs)))
    var_p, _ = mac_variance(x[perm], w[perm], SIGMAS)
    assert var_p == pytest.approx(var, rel=1e-12, abs=1e-300)
    var_c, rel_c = mac_variance(c * x, w, SIGMAS)
    assert var_c == pytest.approx(c * c * var, rel=1e-12, abs=1e-300)
    if not math.isnan(rel) and abs(x @ w) > 1e-6:
        assert rel_c == pytest.approx(rel, rel=1e-9)


def test_laser_mode_switch():
    p = NoiseParams.pre_trim(0.1, laser_mode="global")
    assert p.laser_mode is LaserMode.GLOBAL
