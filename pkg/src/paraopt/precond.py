"""Diagonalization-based preconditioner for the coarse matching Jacobian.

The Toeplitz shift in the Jacobian is replaced by the alpha-circulant
``C(alpha)`` (ones on the first subdiagonal, ``alpha`` in the top-right
corner) and the coupling to the final row is dropped. With ``|alpha| = 1``,
``C(alpha) = G^-1 F^* D F G`` and ``C(alpha)^* = G^-1 F^* D^* F G`` share the
transforms, so the preconditioner splits into ``L`` independent ``2N x 2N``
systems

    [ I - d P_y        -P_lam        ] [dy  ]   [dp]
    [ -Q_y             I - d^* Q_lam ] [dlam] = [dq]

one per eigenvalue ``d`` of ``C(alpha)``. For nonlinear problems the
propagator derivatives are taken about the averaged iterate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._parallel import pmap
from .bvp import BCSpec, LinearizedBVP, SolveLedger, Trajectory, coarse_solve_nonlinear
from .model import ControlProblem
from .numkit import dense_solve, dft, gmres, idft

INNER_METHODS = ("adjusted_bc", "inner_gmres", "direct")


class InnerSolveError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"inner solve {index} failed: {cause}")
        self.index = index


@dataclass(frozen=True)
class CirculantSpectrum:
    alpha: complex
    L: int
    gamma_factors: np.ndarray
    d: np.ndarray


def alpha_circulant(L: int, alpha: complex) -> np.ndarray:
    """Dense ``C(alpha)``: ones on the first subdiagonal, ``alpha`` top-right."""
    C = np.eye(L, k=-1, dtype=complex)
    C[0, L - 1] += alpha
    return C


def circulant_spectrum(L: int, alpha: complex = 1.0) -> CirculantSpectrum:
    """Scaling factors ``alpha^(j/L)`` and eigenvalues of ``C(alpha)``.

    The eigenvalues come out as ``alpha^(1/L) exp(-2 pi i j / L)``; the sign of
    the exponent follows :func:`paraopt.numkit.dft`.
    """
    if L < 1:
        raise ValueError("L must be at least 1")
    alpha = complex(alpha)
    if abs(abs(alpha) - 1.0) > 1e-14:
        raise ValueError("alpha must have unit modulus")
    theta = np.angle(alpha)
    gamma_factors = np.exp(1j * theta * np.arange(L) / L)
    c1 = alpha_circulant(L, alpha)[:, 0]
    d = np.sqrt(L) * dft(gamma_factors * c1)
    return CirculantSpectrum(alpha, L, gamma_factors, d)


def averages(Y, Lam):
    """Means of the interface values over subintervals, summed in index order."""
    Y = np.asarray(Y)
    Lam = np.asarray(Lam)
    Y_av = np.zeros(Y.shape[1], dtype=Y.dtype)
    Lam_av = np.zeros(Lam.shape[1], dtype=Lam.dtype)
    for row in Y:
        Y_av = Y_av + row
    for row in Lam:
        Lam_av = Lam_av + row
    return Y_av / Y.shape[0], Lam_av / Lam.shape[0]


def propagator_blocks(lin: LinearizedBVP, ledger: Optional[SolveLedger] = None, index: Optional[int] = None):
    """Dense ``P_y, P_lam, Q_y, Q_lam`` from ``2N`` unit-vector derivative solves."""
    N = lin.N
    I, Z = np.eye(N), np.zeros((N, N))
    _, P_y, Q_y, _ = lin.solve(BCSpec.standard(I, Z), ledger, index)
    _, P_lam, Q_lam, _ = lin.solve(BCSpec.standard(Z, I), ledger, index)
    return P_y, P_lam, Q_y, Q_lam


def inner_matrix(blocks, d: complex) -> np.ndarray:
    P_y, P_lam, Q_y, Q_lam = blocks
    I = np.eye(P_y.shape[0])
    return np.block([[I - d * P_y, -P_lam], [-Q_y, I - np.conj(d) * Q_lam]])


@dataclass
class AveragedContext:
    """Linearization of the coarse derivative system about the averaged iterate."""

    Y_av: np.ndarray
    Lam_av: np.ndarray
    traj_av: Trajectory
    lin: LinearizedBVP
    direct_cap: int = 256
    _blocks: Optional[tuple] = field(default=None, repr=False)

    def blocks(self, ledger: Optional[SolveLedger] = None):
        """Dense propagator derivatives, assembled once and cached."""
        if self._blocks is None:
            if self.lin.N > self.direct_cap:
                raise ValueError(f"dense inner solve refused: N={self.lin.N} exceeds cap {self.direct_cap}")
            self._blocks = propagator_blocks(self.lin, ledger, None)
        return self._blocks


def averaged_context(
    problem: ControlProblem,
    Y,
    Lam,
    dT: float,
    coarse_steps: int = 2,
    ledger: Optional[SolveLedger] = None,
    direct_cap: int = 256,
) -> AveragedContext:
    """One coarse nonlinear solve on ``[0, dT]`` from the averaged interface values.

    The solve is attributed to every subinterval in ``ledger``.
    """
    Y_av, Lam_av = averages(Y, Lam)
    _, _, traj = coarse_solve_nonlinear(problem, Y_av, Lam_av, (0.0, dT), coarse_steps, ledger, None)
    return AveragedContext(Y_av, Lam_av, traj, LinearizedBVP(problem, traj), direct_cap)


@dataclass(frozen=True)
class InnerSystem:
    d_ell: complex
    lin: LinearizedBVP
    index: int = 0

    def __post_init__(self):
        if abs(abs(self.d_ell) - 1.0) > 1e-13:
            raise ValueError("inner systems need |d| == 1")


def inner_solve_adjusted_bc(sys: InnerSystem, dp, dq, ledger: Optional[SolveLedger] = None):
    """Invert the inner system with a single derivative solve.

    Writing ``d = exp(i theta)`` and ``c = exp(i theta/2)`` the inner matrix is
    ``-diag(c, conj(c)) Mt diag(c, conj(c))`` where ``Mt`` carries ``-conj(d)``
    and ``-d`` on its identity blocks. ``Mt`` acts like the derivative system
    with two-point conditions coupling both ends, so one solve inverts it.
    """
    d = sys.d_ell
    theta = np.angle(d)
    c = np.exp(0.5j * theta)
    a = np.asarray(dp) / c
    b = c * np.asarray(dq)
    z_a, _, _, mu_b = sys.lin.solve(BCSpec.adjusted(d, a, b), ledger, sys.index)
    return -z_a / c, -c * mu_b


def inner_solve_gmres(
    sys: InnerSystem,
    dp,
    dq,
    tol: float = 1e-10,
    maxit: int = 200,
    ledger: Optional[SolveLedger] = None,
):
    """GMRES on the inner system; each product costs two derivative solves."""
    N = sys.lin.N
    d = sys.d_ell

    def apply(w):
        dy, dlam = w[:N], w[N:]
        _, Py, Qy, _ = sys.lin.solve(BCSpec.standard(dy, np.zeros(N)), ledger, sys.index)
        _, Pl, Ql, _ = sys.lin.solve(BCSpec.standard(np.zeros(N), dlam), ledger, sys.index)
        return np.concatenate([dy - d * Py - Pl, dlam - Qy - np.conj(d) * Ql])

    res = gmres(apply, np.concatenate([dp, dq]), tol=tol, maxit=maxit)
    if not res.converged:
        warnings.warn(
            f"inner GMRES for system {sys.index} stopped at {res.residuals[-1]:.2e} after {res.iters} iterations",
            RuntimeWarning,
            stacklevel=2,
        )
    return res.x[:N], res.x[N:]


def inner_solve_direct(sys: InnerSystem, dp, dq, blocks=None):
    """Dense solve with the assembled inner matrix."""
    if blocks is None:
        blocks = propagator_blocks(sys.lin)
    M = inner_matrix(blocks, sys.d_ell)
    x = dense_solve(M, np.concatenate([dp, dq]))
    N = sys.lin.N
    return x[:N], x[N:]


def precond_apply(
    ctx: AveragedContext,
    spectrum: CirculantSpectrum,
    inner: str,
    v,
    ledger: Optional[SolveLedger] = None,
    inner_tol: float = 1e-10,
    inner_maxit: int = 200,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Apply ``P(alpha)^{-1}`` to a vector laid out as ``[Y_1..Y_L, Lam_1..Lam_L]``."""
    if inner not in INNER_METHODS:
        raise ValueError(f"unknown inner method {inner!r}")
    L, N = spectrum.L, ctx.lin.N
    v = np.asarray(v).reshape(2, L, N)
    g = spectrum.gamma_factors[:, None]
    hat = dft(g[None] * v, axis=1)
    blocks = ctx.blocks(ledger) if inner == "direct" else None

    def solve(ell):
        sys = InnerSystem(spectrum.d[ell], ctx.lin, ell)
        dp, dq = hat[0, ell], hat[1, ell]
        try:
            if inner == "adjusted_bc":
                return inner_solve_adjusted_bc(sys, dp, dq, ledger)
            if inner == "inner_gmres":
                return inner_solve_gmres(sys, dp, dq, inner_tol, inner_maxit, ledger)
            return inner_solve_direct(sys, dp, dq, blocks)
        except Exception as exc:
            raise InnerSolveError(ell, exc) from exc

    sols = pmap(solve, L, workers)
    out = np.empty((2, L, N), dtype=complex)
    for ell, (dy, dlam) in enumerate(sols):
        out[0, ell] = dy
        out[1, ell] = dlam
    out = idft(out, axis=1) / g[None]
    return out.reshape(-1)


def dense_preconditioner(blocks, L: int, alpha: complex = 1.0) -> np.ndarray:
    """Assemble ``P(alpha)`` explicitly from Kronecker products."""
    P_y, P_lam, Q_y, Q_lam = blocks
    N = P_y.shape[0]
    C = alpha_circulant(L, alpha)
    I_L = np.eye(L)
    I = np.eye(L * N)
    return np.block(
        [
            [I - np.kron(C, P_y), -np.kron(I_L, P_lam)],
            [-np.kron(I_L, Q_y), I - np.kron(C.conj().T, Q_lam)],
        ]
    )


class DiagonalPreconditioner:
    """Callable ``P(alpha)^{-1}`` for one Newton step."""

    def __init__(
        self,
        ctx: AveragedContext,
        spectrum: CirculantSpectrum,
        inner: str = "adjusted_bc",
        ledger: Optional[SolveLedger] = None,
        inner_tol: float = 1e-10,
        inner_maxit: int = 200,
        workers: Optional[int] = None,
    ):
        self.ctx = ctx
        self.spectrum = spectrum
        self.inner = inner
        self.ledger = ledger
        self.inner_tol = inner_tol
        self.inner_maxit = inner_maxit
        self.workers = workers

    def __call__(self, v):
        return precond_apply(
            self.ctx, self.spectrum, self.inner, v, self.ledger, self.inner_tol, self.inner_maxit, self.workers
        )
