import math
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from photonvit.core_math import (
    MATRIX_MAGIC, SeedContext, as_matrix, gauss, load_matrix, load_matrix_csv, matmul, save_matrix,
    save_matrix_csv, std_normal_cdf, std_normal_quantile,
)
from photonvit.errors import ParameterError, ShapeError


def loop_matmul(a, b):
    """Triple-loop oracle accumulating in the same left-to-right order."""
    m, k = len(a), len(a[0])
    n = len(b[0])
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc = acc + a[i][t] * b[t][j]
            out[i][j] = acc
    return np.array(out)


def erfc_quantile(p):
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(-mid / math.sqrt(2)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


dims = st.integers(1, 9)


@settings(max_examples=40, deadline=None)
@given(dims, dims, dims, st.integers(0, 2 ** 32 - 1))
def test_matmul_matches_loop_oracle_bitwise(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    assert np.array_equal(matmul(a, b), loop_matmul(a.tolist(), b.tolist()))


def test_matmul_identity_and_zero():
    a = np.random.default_rng(1).standard_normal((5, 5))
    assert np.array_equal(matmul(a, np.eye(5)), a)
    assert np.array_equal(matmul(np.zeros((3, 4)), np.ones((4, 2))), np.zeros((3, 2)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_as_matrix_rejects_bad_input():
    with pytest.raises(ShapeError):
        as_matrix(np.ones((2, 2, 2)))
    with pytest.raises(ParameterError):
        as_matrix([[1.0, np.nan]])
    assert as_matrix([1.0, 2.0]).shape == (1, 2)


def test_seed_context_streams():
    ctx = SeedContext(7)
    a = ctx.child("chip", 0).generator().standard_normal(5)
    b = ctx.child("chip", 0).generator().standard_normal(5)
    c = ctx.child("chip", 1).generator().standard_normal(5)
    d = SeedContext(8).child("chip", 0).generator().standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)
    assert ctx.child("layer", 2).child("tile", 3).path_str() == "layer2/tile3"


def test_seed_context_order_independent():
    ctx = SeedContext(3)
    first = ctx.child("x").generator().random(4)
    ctx.child("y").generator().random(1000)
    again = ctx.child("x").generator().random(4)
    assert np.array_equal(first, again)


def test_gauss_moments_and_degenerate():
    ctx = SeedContext(11, (("g", 0),))
    x = gauss(ctx, 200_000, 1.5, 2.0)
    assert abs(x.mean() - 1.5) < 4 * 2.0 / math.sqrt(x.size)
    assert abs(x.std() - 2.0) < 0.02
    assert np.array_equal(gauss(ctx, (2, 3), 4.0, 0.0), np.full((2, 3), 4.0))
    with pytest.raises(ParameterError):
        gauss(ctx, 3, 0.0, -1.0)


@pytest.mark.parametrize("x", [-5.0, -1.2, 0.0, 0.3, 2.5, 7.0])
def test_cdf_against_erfc(x):
    assert std_normal_cdf(x) == pytest.approx(0.5 * math.erfc(-x / math.sqrt(2)), rel=1e-14, abs=1e-300)


@pytest.mark.parametrize("p", [1e-10, 0.025, 0.5, 0.8, 0.875, 0.95, 0.999])
def test_quantile_against_bisection(p):
    assert std_normal_quantile(p) == pytest.approx(erfc_quantile(p), abs=1e-9)


def test_quantile_frozen_values():
    assert std_normal_quantile(0.95) == pytest.approx(1.6448536269514722, abs=1e-12)
    assert std_normal_quantile(0.80) == pytest.approx(0.8416212335729143, abs=1e-12)
    assert std_normal_quantile(0.5) == 0.0


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_quantile_domain(p):
    with pytest.raises(ParameterError):
        std_normal_quantile(p)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-12, 1 - 1e-12))
def test_quantile_inverts_cdf(p):
    assert std_normal_cdf(std_normal_quantile(p)) == pytest.approx(p, rel=1e-9, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
def test_binary_container_round_trip(rows, cols, seed):
    m = np.random.default_rng(seed).standard_normal((rows, cols)) * 1e6
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "m.pvm"
        save_matrix(path, m)
        raw = path.read_bytes()
        loaded = load_matrix(path)
    assert np.array_equal(loaded, m)
    assert raw[:8] == MATRIX_MAGIC
    assert struct.unpack_from("<QQ", raw, 8) == (rows, cols)
    assert len(raw) == 24 + 8 * rows * cols


def test_binary_container_rejects_corruption(tmp_path):
    path = tmp_path / "m.pvm"
    save_matrix(path, np.ones((2, 2)))
    raw = path.read_bytes()
    (tmp_path / "bad.pvm").write_bytes(b"XXXXXXXX" + raw[8:])
    (tmp_path / "short.pvm").write_bytes(raw[:-8])
    (tmp_path / "tiny.pvm").write_bytes(raw[:5])
    for name in ("bad.pvm", "short.pvm", "tiny.pvm"):
        with pytest.raises(ParameterError):
            load_matrix(tmp_path / name)


def test_csv_matrix_round_trip(tmp_path):
    m = np.random.default_rng(2).standard_normal((4, 3)) / 3.0
    save_matrix_csv(tmp_path / "m.csv", m)
    assert np.array_equal(load_matrix_csv(tmp_path / "m.csv"), m)
