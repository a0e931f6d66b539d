"""Dense arithmetic, addressable random streams and normal-distribution helpers.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; :func:`as_matrix`
is the single validation gate. Randomness is always drawn through a
:class:`SeedContext`, which maps a master seed plus a labeled path onto an
independent counter-based (Philox) stream, so a draw never depends on what
other streams were consumed before it.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .errors import ParameterError, ShapeError

MATRIX_MAGIC = b"PVMAT\x00\x01\x00"
_HEADER = struct.Struct("<8sQQ")


def as_matrix(x, name="matrix"):
    """Return ``x`` as a finite, C-contiguous 2-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


def matmul(a, b):
    """Exact reference product ``a @ b``.

    Each output entry is accumulated left to right over the inner index with
    one rounding per multiply and per add, which makes the result independent
    of BLAS, FMA availability and thread count.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


@dataclass(frozen=True)
class SeedContext:
    """Address of an independent random stream.

    ``stream_path`` is a tuple of ``(label, index)`` pairs such as
    ``(("chip", 3), ("layer", 1), ("fab", 0))``.
    """

    master_seed: int
    stream_path: tuple = ()

    def child(self, label, index=0):
        return SeedContext(self.master_seed, self.stream_path + ((str(label), int(index)),))

    def key(self):
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<q", int(self.master_seed) & 0x7FFFFFFFFFFFFFFF))
        for label, index in self.stream_path:
            h.update(label.encode("utf-8"))
            h.update(b"\x00")
            h.update(struct.pack("<q", index))
        digest = h.digest()
        return np.frombuffer(digest, dtype="<u8").copy()

    def generator(self):
        return np.random.Generator(np.random.Philox(key=self.key()))

    def path_str(self):
        return "/".join(f"{label}{index}" for label, index in self.stream_path)


def gauss(ctx: SeedContext, n, mean=0.0, std=1.0):
    """``n`` i.i.d. normal draws from the stream addressed by ``ctx``."""
    if std < 0:
        raise ParameterError(f"std must be >= 0, got {std}")
    shape = (n,) if np.isscalar(n) else tuple(n)
    if std == 0:
        return np.full(shape, float(mean))
    return mean + std * ctx.generator().standard_normal(shape)


def std_normal_cdf(x):
    return special.ndtr(x)


def std_normal_quantile(p):
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any((p_arr <= 0) | (p_arr >= 1)):
        raise ParameterError(f"quantile requires p in (0, 1), got {p}")
    out = special.ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def save_matrix(path, m):
    """Write ``m`` to the little-endian binary container.

    Layout: 8 magic bytes, uint64 rows, uint64 cols, rows*cols float64 values
    in row-major order.
    """
    m = as_matrix(m)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MATRIX_MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.astype("<f8").tobytes(order="C"))


def load_matrix(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ParameterError(f"{path}: truncated matrix header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise ParameterError(f"{path}: bad magic bytes {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise ParameterError(f"{path}: expected {rows}x{cols} doubles, found {len(body)} bytes")
    m = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return as_matrix(m, str(path))


def save_matrix_csv(path, m):
    np.savetxt(path, as_matrix(m), delimiter=",", fmt="%.17g")


def load_matrix_csv(path):
    m = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return as_matrix(m, str(path))
