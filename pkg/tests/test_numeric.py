import itertools
import subprocess
import sys

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from leakguard.errors import DomainError, ShapeError
from leakguard.numeric import (RNG_ALGORITHM, entropy_from_counts, euclidean, make_rng, matmul,
                               median, row_distances, uniform)

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    out = [[0.0] * len(b[0]) for _ in a]
    for i in range(len(a)):
        for j in range(len(b[0])):
            s = 0.0
            for p in range(len(b)):
                s += a[i][p] * b[p][j]
            out[i][j] = s
    return out


def test_matmul_identity():
    assert matmul([[1, 0], [0, 1]], [[3], [4]]).tolist() == [[3], [4]]


def test_matmul_hand_arithmetic():
    assert matmul([[1, 2]], [[3], [4]]).tolist() == [[11]]


def test_matmul_matches_triple_loop_exactly():
    rng = make_rng(11)
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    assert matmul(a, b).tolist() == naive_matmul(a.tolist(), b.tolist())


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite),
       arrays(np.float64, (2, 3), elements=finite))
def test_matmul_associative(a, b, c):
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    assert np.allclose(left, right, rtol=0, atol=1e-9 * max(1.0, np.abs(left).max()))


def test_uniform_deterministic():
    one = uniform(make_rng(1), 0, 1, 3)
    two = uniform(make_rng(1), 0, 1, 3)
    assert one.tolist() == two.tolist()


def test_uniform_range_and_mean():
    x = uniform(make_rng(2), -1, 1, 100_000)
    assert x.min() >= -1 and x.max() < 1
    assert abs(x.mean()) < 0.02


def test_uniform_rejects_empty_interval():
    with pytest.raises(DomainError):
        uniform(make_rng(1), 1.0, 1.0, 3)


def test_uniform_never_returns_hi():
    # the largest double below 1, scaled into a narrow interval, rounds up to hi
    x = uniform(make_rng(0), 1.0, 1.0 + 2**-52, 1000)
    assert np.all(x < 1.0 + 2**-52)


def test_rng_stream_identical_across_processes():
    code = ("from leakguard.numeric import make_rng; "
            "print(make_rng(42, 7).random(5).tolist())")
    runs = [subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
            for _ in range(2)]
    assert runs[0] == runs[1]
    assert runs[0].strip() == str(make_rng(42, 7).random(5).tolist())
    assert RNG_ALGORITHM == "PCG64"


def test_make_rng_rejects_negative_seed():
    with pytest.raises(DomainError):
        make_rng(-1)


def test_median_examples():
    assert median([3, 1, 2]) == 2
    assert median([1, 2, 3, 4]) == 2.5
    with pytest.raises(DomainError):
        median([])


def test_median_sort_oracle():
    v = make_rng(5).standard_normal(101)
    assert median(v) == sorted(v)[50]
    w = v[:100]
    s = sorted(w)
    assert median(w) == (s[49] + s[50]) / 2


@pytest.mark.parametrize("n", range(1, 7))
def test_median_permutation_invariant(n):
    s = [float(x) for x in make_rng(n).integers(-5, 5, n)]
    ref = median(s)
    for p in itertools.permutations(s):
        assert median(list(p)) == ref


def test_euclidean_examples():
    assert euclidean([1.5, 2], [1.5, 2]) == 0
    assert euclidean([0, 0], [3, 4]) == 5
    with pytest.raises(ShapeError):
        euclidean([0, 0], [1, 2, 3])


def test_euclidean_high_precision_oracle():
    rng = make_rng(8)
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    mpmath.mp.dps = 50
    exact = mpmath.sqrt(mpmath.fsum((mpmath.mpf(x) - mpmath.mpf(y)) ** 2 for x, y in zip(a, b)))
    assert abs(euclidean(a, b) - float(exact)) <= 4e-16 * float(exact)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_euclidean_triangle_and_symmetry(p):
    a, b, c = p
    assert euclidean(a, b) == euclidean(b, a)
    assert euclidean(a, c) <= euclidean(a, b) + euclidean(b, c) + 1e-12


def test_row_distances_match_euclidean():
    rng = make_rng(9)
    rows, x = rng.standard_normal((30, 17)), rng.standard_normal(17)
    assert row_distances(rows, x).tolist() == [euclidean(r, x) for r in rows]


def test_entropy_examples():
    assert entropy_from_counts([5, 0, 0]) == 0.0
    assert entropy_from_counts([2] * 6) == pytest.approx(np.log(6), abs=1e-15)
    assert entropy_from_counts([3, 1]) == pytest.approx(0.5623351446188083, abs=1e-15)
    with pytest.raises(DomainError):
        entropy_from_counts([0, 0])
