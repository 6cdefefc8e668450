import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paraopt.numkit import LinearMap, SingularMatrixError, dense_solve, dft, dft_matrix, gmres, idft


def test_dft_impulse_is_constant():
    np.testing.assert_allclose(dft([1, 0, 0, 0]), 0.5 * np.ones(4), atol=1e-15)


def test_dft_constant_is_impulse():
    np.testing.assert_allclose(dft(np.ones(4)), [2, 0, 0, 0], atol=1e-15)


def test_dft_parseval(rng):
    v = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    assert abs(np.linalg.norm(dft(v)) - np.linalg.norm(v)) <= 1e-13 * np.linalg.norm(v)


@pytest.mark.parametrize("L", [1, 2, 4, 7, 20])
def test_idft_inverts_dft(L, rng):
    v = rng.standard_normal(L) + 1j * rng.standard_normal(L)
    assert np.linalg.norm(idft(dft(v)) - v) <= 1e-13 * np.linalg.norm(v)


def test_dft_matrix_matches_transform(rng):
    v = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    np.testing.assert_allclose(dft_matrix(6) @ v, dft(v), atol=1e-13)


def test_dft_along_axis(rng):
    v = rng.standard_normal((2, 5, 3))
    out = dft(v, axis=1)
    np.testing.assert_allclose(out[1, :, 2], dft(v[1, :, 2]), atol=1e-14)


def test_gmres_identity():
    b = np.arange(1.0, 6.0)
    res = gmres(np.eye(5), b, tol=1e-10)
    np.testing.assert_allclose(res.x, b, atol=1e-14)
    assert res.iters == 1 and res.converged


def test_gmres_diagonal():
    A = np.diag(np.arange(1.0, 11.0))
    res = gmres(A, np.ones(10), tol=1e-10)
    np.testing.assert_allclose(res.x, 1.0 / np.arange(1, 11), rtol=1e-9)


def test_gmres_matches_dense_solve(rng):
    A = np.eye(50) * 4 + rng.standard_normal((50, 50)) / np.sqrt(50)
    b = rng.standard_normal(50)
    res = gmres(LinearMap.from_matrix(A), b, tol=1e-12, maxit=50)
    x_dense = dense_solve(A, b)
    assert np.linalg.norm(res.x - x_dense) <= 1e-8 * np.linalg.norm(x_dense)


def test_gmres_right_preconditioning_reports_true_residual(rng):
    A = np.diag(np.linspace(1, 1000, 40)) + 0.1 * rng.standard_normal((40, 40))
    b = rng.standard_normal(40)
    Minv = np.diag(1.0 / np.diag(A))
    plain = gmres(A, b, tol=1e-10, maxit=40)
    pre = gmres(A, b, tol=1e-10, maxit=40, M_right=lambda v: Minv @ v)
    assert pre.converged
    assert np.linalg.norm(b - A @ pre.x) <= 1e-10 * np.linalg.norm(b) * (1 + 1e-6)
    assert pre.iters < plain.iters


def test_gmres_maxit_flag(rng):
    A = rng.standard_normal((30, 30)) + 5 * np.eye(30)
    res = gmres(A, rng.standard_normal(30), tol=1e-14, maxit=3)
    assert res.iters == 3 and not res.converged
    assert len(res.residuals) == 4


def test_gmres_complex_system(rng):
    A = np.eye(12) * (2 + 1j) + 0.2 * (rng.standard_normal((12, 12)) + 1j * rng.standard_normal((12, 12)))
    b = rng.standard_normal(12) + 1j * rng.standard_normal(12)
    res = gmres(A, b, tol=1e-12)
    assert np.linalg.norm(A @ res.x - b) <= 1e-12 * np.linalg.norm(b) * 1.01


def test_gmres_zero_rhs():
    res = gmres(np.eye(3), np.zeros(3))
    assert res.iters == 0 and res.converged and not res.x.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 25), st.floats(1e-10, 1e-4), st.integers(0, 2**31 - 1))
def test_gmres_meets_tolerance(n, tol, seed):
    rng = np.random.default_rng(seed)
    A = np.eye(n) * 3 + rng.standard_normal((n, n)) / np.sqrt(n)
    b = rng.standard_normal(n)
    res = gmres(A, b, tol=tol, maxit=n)
    assert res.converged
    assert np.linalg.norm(b - A @ res.x) <= tol * np.linalg.norm(b) * (1 + 1e-6)


def test_dense_solve_examples():
    np.testing.assert_allclose(dense_solve(np.eye(3), [1, 2, 3]), [1, 2, 3])
    np.testing.assert_allclose(dense_solve([[2, 0], [0, 4]], [2, 4]), [1, 1])


def test_dense_solve_residual(rng):
    A = rng.standard_normal((20, 20))
    b = rng.standard_normal(20)
    x = dense_solve(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)


def test_dense_solve_singular():
    with pytest.raises(SingularMatrixError):
        dense_solve([[1.0, 2.0], [2.0, 4.0]], [1.0, 1.0])


def test_linear_map_superposition(rng):
    A = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    op = LinearMap.from_matrix(A)
    u, v = rng.standard_normal(6), rng.standard_normal(6) + 1j
    a, b = 0.3 - 2j, 1.7
    lhs = op(a * u + b * v)
    rhs = a * op(u) + b * op(v)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)


def test_linear_map_shape_check():
    with pytest.raises(ValueError):
        LinearMap.identity(3)(np.ones(4))
