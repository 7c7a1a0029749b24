"""Shared numeric helpers: matrices, seeded generators, small statistics.

Every experiment draws its randomness from :func:`make_rng`, which wraps
numpy's PCG64 bit generator. PCG64 output is specified bit-for-bit by numpy
and does not depend on the platform, so a seed reproduces the same stream
everywhere.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import DomainError, ShapeError

RNG_ALGORITHM = "PCG64"


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return a PCG64 generator for ``seed``.

    Extra integers select an independent sub-stream, e.g.
    ``make_rng(seed, SESSION_TAG, index)``.
    """
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
    entropy = [int(seed), *(int(s) for s in stream)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} contains non-finite entries")
    return m


def as_vector(x, length: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {v.shape}")
    if length is not None and v.shape[0] != length:
        raise ShapeError(f"{name} has length {v.shape[0]}, expected {length}")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    ``out[i, j]`` is accumulated as ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``,
    left to right over the inner index, which is what a naive triple loop
    produces. Use ``@`` instead where speed matters more than bit-exact order.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for p in range(a.shape[1]):
        out += np.multiply.outer(a[:, p], b[p, :])
    return out


def uniform(rng: np.random.Generator, lo: float, hi: float, n: int) -> np.ndarray:
    """``n`` draws from U[lo, hi)."""
    if not lo < hi:
        raise DomainError(f"uniform needs lo < hi, got lo={lo}, hi={hi}")
    if n < 0:
        raise DomainError("n must be non-negative")
    out = rng.uniform(lo, hi, n)
    # lo + (hi-lo)*u can round up to hi for some (lo, hi)
    np.minimum(out, np.nextafter(hi, lo), out=out)
    return out


def median(values: Sequence[float]) -> float:
    """Median; even lengths average the two central order statistics."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DomainError("median of an empty sequence")
    return float(np.median(v))


def euclidean(a, b) -> float:
    a = as_vector(a, name="a")
    b = as_vector(b, name="b")
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff)))


def row_distances(rows: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Euclidean distance from ``x`` to every row; matches :func:`euclidean` per row."""
    diff = rows - x
    return np.sqrt(np.sum(diff * diff, axis=1))


def entropy_from_counts(counts) -> float:
    """Natural-log entropy of the empirical distribution given by ``counts``."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise DomainError("entropy of an empty histogram")
    h = 0.0
    for c in counts:
        if c > 0:
            p = c / total
            h -= p * math.log(p)
    return h
