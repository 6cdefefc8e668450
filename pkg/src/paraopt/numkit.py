"""Dense linear algebra, unitary DFT and a matrix-free GMRES.

All Krylov machinery works in complex arithmetic; real inputs are promoted.
The DFT follows numpy's sign convention (``exp(-2j*pi*j*k/L)``) with unitary
``1/sqrt(L)`` scaling, so ``idft`` is the conjugate transpose of ``dft``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Union

import numpy as np
import scipy.linalg


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a pivot vanishes to working precision."""


@dataclass(frozen=True)
class LinearMap:
    """A matrix-free linear operator ``C^dim_in -> C^dim_out``."""

    dim_in: int
    dim_out: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.dim_in < 1 or self.dim_out < 1:
            raise ValueError("LinearMap dimensions must be positive")

    def __call__(self, v):
        v = np.asarray(v)
        if v.shape != (self.dim_in,):
            raise ValueError(f"expected vector of length {self.dim_in}, got shape {v.shape}")
        return self.apply(v)

    @classmethod
    def from_matrix(cls, A) -> "LinearMap":
        A = np.asarray(A)
        return cls(A.shape[1], A.shape[0], lambda v: A @ v)

    @classmethod
    def identity(cls, n: int) -> "LinearMap":
        return cls(n, n, lambda v: np.array(v, dtype=complex))


OperatorLike = Union[LinearMap, np.ndarray, Callable[[np.ndarray], np.ndarray]]


def _as_callable(op: OperatorLike) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(op, np.ndarray):
        return lambda v: op @ v
    return op


def dft(v, axis: int = 0) -> np.ndarray:
    """Unitary discrete Fourier transform along ``axis``."""
    return np.fft.fft(np.asarray(v, dtype=complex), axis=axis, norm="ortho")


def idft(v, axis: int = 0) -> np.ndarray:
    """Inverse of :func:`dft` (its conjugate transpose)."""
    return np.fft.ifft(np.asarray(v, dtype=complex), axis=axis, norm="ortho")


def dft_matrix(L: int) -> np.ndarray:
    """Dense unitary DFT matrix, ``dft(v) == dft_matrix(L) @ v``."""
    j = np.arange(L)
    return np.exp(-2j * np.pi * np.outer(j, j) / L) / np.sqrt(L)


def dense_solve(A, b) -> np.ndarray:
    """Solve ``A x = b`` by LU with partial pivoting.

    Raises
    ------
    SingularMatrixError
        If a pivot of the factorization is zero relative to the matrix scale.
    """
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"dense_solve needs a square matrix, got shape {A.shape}")
    with warnings.catch_warnings():
        # singularity is reported below through our own exception
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    pivots = np.abs(np.diag(lu))
    scale = np.max(np.abs(A)) if A.size else 0.0
    if scale == 0.0 or pivots.min() <= A.shape[0] * np.finfo(float).eps * scale:
        raise SingularMatrixError("matrix is singular to working precision")
    return scipy.linalg.lu_solve((lu, piv), b)


class GMRESResult(NamedTuple):
    x: np.ndarray
    iters: int
    converged: bool
    residuals: np.ndarray


def gmres(
    A: OperatorLike,
    b,
    tol: float = 1e-8,
    maxit: int = 200,
    M_right: Optional[OperatorLike] = None,
    atol: float = 0.0,
) -> GMRESResult:
    """Unrestarted GMRES with optional right preconditioning.

    Solves ``A x = b`` from a zero initial guess. With a right preconditioner
    the Krylov space is built for ``A M^{-1}`` and the residual being minimized
    is the true residual ``b - A x``. The preconditioned directions are kept so
    that every iteration costs exactly one application of ``A`` and one of
    ``M_right``, with no extra application to recover ``x``.

    Parameters
    ----------
    A : LinearMap, ndarray or callable
        The operator.
    b : array_like
        Right-hand side.
    tol : float
        Relative tolerance on ``||b - A x|| / ||b||``.
    maxit : int
        Maximum number of iterations (Krylov dimension).
    M_right : LinearMap, ndarray or callable, optional
        Action of the inverse preconditioner.
    atol : float
        Absolute residual floor; the stopping test is
        ``||r|| <= max(tol * ||b||, atol)``.

    Returns
    -------
    GMRESResult
        ``(x, iters, converged, residuals)`` where ``residuals`` holds the
        residual norm after each iteration, starting with ``||b||``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if maxit < 1:
        raise ValueError("maxit must be at least 1")
    apply_A = _as_callable(A)
    apply_M = _as_callable(M_right) if M_right is not None else None

    b = np.asarray(b, dtype=complex)
    n = b.shape[0]
    beta = np.linalg.norm(b)
    target = max(tol * beta, atol)
    if beta <= target:
        return GMRESResult(np.zeros(n, dtype=complex), 0, True, np.array([beta]))

    m = min(maxit, n)
    V = np.zeros((m + 1, n), dtype=complex)
    Z = np.zeros((m, n), dtype=complex) if apply_M is not None else None
    H = np.zeros((m + 1, m), dtype=complex)
    cs = np.zeros(m, dtype=complex)
    sn = np.zeros(m, dtype=complex)
    g = np.zeros(m + 1, dtype=complex)
    g[0] = beta
    V[0] = b / beta
    residuals = [beta]

    k = 0
    converged = False
    for j in range(m):
        if apply_M is not None:
            Z[j] = apply_M(V[j])
            w = np.asarray(apply_A(Z[j]), dtype=complex)
        else:
            w = np.asarray(apply_A(V[j]), dtype=complex)
        wnorm = np.linalg.norm(w)
        # modified Gram-Schmidt, one reorthogonalization pass when needed
        for i in range(j + 1):
            H[i, j] = np.vdot(V[i], w)
            w = w - H[i, j] * V[i]
        if np.linalg.norm(w) < 0.7 * wnorm:
            for i in range(j + 1):
                c = np.vdot(V[i], w)
                H[i, j] += c
                w = w - c * V[i]
        h_next = np.linalg.norm(w)
        H[j + 1, j] = h_next

        for i in range(j):
            t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
            H[i + 1, j] = -np.conj(sn[i]) * H[i, j] + np.conj(cs[i]) * H[i + 1, j]
            H[i, j] = t
        a, bb = H[j, j], H[j + 1, j]
        r = np.hypot(abs(a), abs(bb))
        if r == 0.0:
            cs[j], sn[j] = 1.0, 0.0
        elif a == 0:
            cs[j], sn[j] = 0.0, 1.0
        else:
            cs[j] = abs(a) / r
            sn[j] = (a / abs(a)) * np.conj(bb) / r
        H[j, j] = cs[j] * a + sn[j] * bb
        H[j + 1, j] = 0.0
        g[j + 1] = -np.conj(sn[j]) * g[j]
        g[j] = cs[j] * g[j]

        k = j + 1
        res = abs(g[j + 1])
        residuals.append(res)
        if res <= target:
            converged = True
            break
        if h_next <= np.finfo(float).eps * max(wnorm, 1.0):
            # happy breakdown: the Krylov space is invariant
            break
        V[j + 1] = w / h_next

    y = _upper_solve(H[:k, :k], g[:k])
    basis = Z[:k] if Z is not None else V[:k]
    x = basis.T @ y
    return GMRESResult(x, k, converged, np.array(residuals))


def _upper_solve(R, g):
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() == 0.0:
        return np.linalg.lstsq(R, g, rcond=None)[0]
    return scipy.linalg.solve_triangular(R, g, lower=False)
