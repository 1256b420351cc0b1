import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from matrain.errors import NumericError, ShapeError, SpectrumError
from matrain.numerics import (
    eig_sym,
    effective_rank,
    frobenius_distance,
    lambda_max,
    matmul_transpose,
    top_eigenpairs,
)


def random_symmetric(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n))
    return (a + a.T) / 2


def test_matmul_transpose_examples():
    np.testing.assert_array_equal(matmul_transpose([[1.0, 2.0]]), [[5.0]])
    np.testing.assert_array_equal(matmul_transpose([[1.0], [2.0]]), [[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(ShapeError):
        matmul_transpose(np.zeros((0, 3)))
    with pytest.raises(ShapeError):
        matmul_transpose(np.ones(3))


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-10, 10)))
def test_matmul_transpose_symmetric_psd(a):
    g = matmul_transpose(a)
    np.testing.assert_array_equal(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-9 * max(1.0, np.abs(g).max())


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        eig_sym([[1.0, np.nan], [np.nan, 1.0]])


def test_frobenius_distance():
    assert frobenius_distance([[3.0, 0.0]], [[0.0, 4.0]]) == pytest.approx(5.0)
    with pytest.raises(ShapeError):
        frobenius_distance(np.eye(2), np.eye(3))


def test_eig_sym_diagonal_and_2x2():
    s = eig_sym(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(s.eigenvalues, [3.0, 2.0, 1.0], atol=1e-12)
    s = eig_sym([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(s.eigenvalues, [3.0, 1.0], atol=1e-12)
    u = s.eigenvectors[:, 0]
    assert abs(abs(u[0]) - 1 / math.sqrt(2)) < 1e-12


def test_eig_sym_rejects_asymmetric():
    with pytest.raises(ShapeError):
        eig_sym([[1.0, 2.0], [0.0, 1.0]])
    with pytest.raises(ShapeError):
        eig_sym(np.ones((2, 3)))


def test_eig_sym_psd_clamp():
    # tiny negative rounding noise is clamped, real negativity is an error
    m = np.array([[1.0, 1.0], [1.0, 1.0]]) + np.diag([0.0, -1e-13])
    s = eig_sym(m, psd=True)
    assert s.eigenvalues.min() == 0.0
    with pytest.raises(SpectrumError):
        eig_sym([[1.0, 0.0], [0.0, -1.0]], psd=True)


@pytest.mark.parametrize("n", [1, 2, 5, 16, 33])
def test_eig_sym_matches_lapack(n):
    m = random_symmetric(n, n)
    s = eig_sym(m)
    np.testing.assert_allclose(s.eigenvalues, np.linalg.eigvalsh(m)[::-1], atol=1e-10)
    np.testing.assert_allclose(s.eigenvectors.T @ s.eigenvectors, np.eye(n), atol=1e-12)
    assert np.linalg.norm(s.reconstruct() - m) <= 1e-10 * np.linalg.norm(m)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=st.floats(-5, 5)))
def test_eig_sym_gram_properties(a):
    g = matmul_transpose(a)
    s = eig_sym(g, psd=True)
    w = s.eigenvalues
    assert np.all(np.diff(w) <= 0)
    assert np.all(w >= 0)
    assert math.isclose(w.sum(), np.trace(g), rel_tol=1e-8, abs_tol=1e-10)
    assert np.linalg.norm(s.reconstruct() - g) <= 1e-9 * max(1.0, np.linalg.norm(g))


def test_top_eigenpairs_matches_full():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((10, 6))
    g = a @ a.T
    full = eig_sym(g)
    pairs = top_eigenpairs(g, 3)
    for i, (value, vec) in enumerate(pairs):
        assert value == pytest.approx(full.eigenvalues[i], rel=1e-8)
        assert abs(abs(vec @ full.eigenvectors[:, i]) - 1) < 1e-6


def test_lambda_max_zero_matrix_is_degenerate():
    pair = lambda_max(np.zeros((4, 4)))
    assert pair.value == 0.0 and pair.degenerate
    assert np.linalg.norm(pair.vector) == pytest.approx(1.0)


def test_lambda_max_rank_one():
    pair = lambda_max([[1.0, 2.0], [2.0, 4.0]])
    assert pair.value == pytest.approx(5.0, rel=1e-10)
    assert not pair.degenerate


def test_effective_rank_examples():
    assert effective_rank([1, 1, 1, 1]) == pytest.approx(4.0, abs=1e-10)
    assert effective_rank([7.0, 0, 0]) == pytest.approx(1.0, abs=1e-10)
    for bad in ([], [1.0, -1.0], [0.0, 0.0]):
        with pytest.raises(SpectrumError):
            effective_rank(bad)


@given(
    arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 1e3)).filter(lambda v: v.sum() > 1e-6),
    st.floats(1e-3, 1e3),
)
def test_effective_rank_bounds_and_scale(values, c):
    r = effective_rank(values)
    assert 1.0 <= r <= values.size
    assert effective_rank(values * c) == pytest.approx(r, rel=1e-10)
