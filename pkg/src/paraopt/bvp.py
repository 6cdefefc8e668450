"""Subinterval solvers for the forward-backward optimality system.

On ``[T_a, T_b]`` with ``m`` uniform steps of size ``h`` the discrete system is

    y_{i+1} - y_i = h g(y_{i+1}) - (h/gamma) lam_{i+1}                 i = 0..m-1
    lam_{i+1} - lam_i = -h g'(y_i)^* lam_i [- h (y_i - y_d(t_i))]      i = 0..m-1

i.e. implicit Euler forward in ``y`` and backward in ``lam``, closed by two
boundary rows. The bracketed term is present for tracking objectives only.
The derivative system is the exact linearization of these equations, so
derivative solves return exact derivatives of the discrete propagators.

Unknowns are stored time-major as ``[y_0, lam_0, y_1, lam_1, ...]``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .model import ControlProblem, FinalValue

NEWTON_TOL = 1e-10
NEWTON_MAXIT = 25
# systems up to this size are factorized densely
_DENSE_LIMIT = 600
# residual growth tolerated by an undamped Newton step
_GROWTH = 100.0


class BVPConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class SingularSystemError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class BCSpec:
    """Two-point conditions ``A_z z(T_a) + B_z z(T_b) = rhs_z`` and
    ``A_mu mu(T_a) + B_mu mu(T_b) = rhs_mu``.

    ``rhs_z``/``rhs_mu`` may be ``N x k`` to request ``k`` solves at once.
    """

    A_z: complex
    B_z: complex
    rhs_z: np.ndarray
    A_mu: complex
    B_mu: complex
    rhs_mu: np.ndarray

    def __post_init__(self):
        if self.A_z == 0 and self.B_z == 0:
            raise ValueError("z boundary row is empty")
        if self.A_mu == 0 and self.B_mu == 0:
            raise ValueError("mu boundary row is empty")
        if np.shape(self.rhs_z) != np.shape(self.rhs_mu):
            raise ValueError("rhs_z and rhs_mu must have the same shape")

    @classmethod
    def standard(cls, dy, dlam) -> "BCSpec":
        """``z(T_a) = dy`` and ``mu(T_b) = dlam``."""
        return cls(1.0, 0.0, np.asarray(dy), 0.0, 1.0, np.asarray(dlam))

    @classmethod
    def adjusted(cls, d: complex, a, b) -> "BCSpec":
        """``-conj(d) z(T_a) + z(T_b) = a`` and ``mu(T_a) - d mu(T_b) = b``."""
        return cls(-np.conj(d), 1.0, np.asarray(a), 1.0, -d, np.asarray(b))

    @property
    def coefficients(self):
        return (complex(self.A_z), complex(self.B_z), complex(self.A_mu), complex(self.B_mu))


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    y: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory grid must be strictly increasing")
        if self.y.shape != self.lam.shape or self.y.shape[0] != self.times.shape[0]:
            raise ValueError("trajectory arrays do not match the grid")

    @property
    def steps(self) -> int:
        return len(self.times) - 1


KINDS = ("coarse_nonlinear", "coarse_linear", "fine")


class SolveLedger:
    """Thread-safe per-subinterval solve counters.

    ``index=None`` in :meth:`add` attributes the count to every subinterval,
    for work that each processor would replicate.
    """

    def __init__(self, L: int):
        self.L = L
        self._lock = threading.Lock()
        self._counts = {kind: np.zeros(L, dtype=np.int64) for kind in KINDS}
        self.gmres_outer_iters = 0
        self.newton_iters = 0

    def add(self, kind: str, index: Optional[int], count: int = 1):
        with self._lock:
            if index is None:
                self._counts[kind] += count
            else:
                self._counts[kind][index] += count

    def add_gmres(self, iters: int):
        with self._lock:
            self.gmres_outer_iters += iters

    def add_newton(self):
        with self._lock:
            self.newton_iters += 1

    def counts(self, kind: str) -> np.ndarray:
        with self._lock:
            return self._counts[kind].copy()

    def max(self, kind: str) -> int:
        return int(self.counts(kind).max())

    def total(self, kind: str) -> int:
        return int(self.counts(kind).sum())

    def snapshot(self) -> dict:
        with self._lock:
            snap = {kind: c.copy() for kind, c in self._counts.items()}
            snap["gmres_outer_iters"] = self.gmres_outer_iters
            snap["newton_iters"] = self.newton_iters
        return snap


def _record(ledger, kind, index, count=1):
    if ledger is not None:
        ledger.add(kind, index, count)


class _Factorization:
    def __init__(self, A):
        self.n = A.shape[0]
        self.real = not np.iscomplexobj(A.data if scipy.sparse.issparse(A) else A)
        self._lock = threading.Lock()
        if self.n <= _DENSE_LIMIT:
            dense = A.toarray() if scipy.sparse.issparse(A) else np.asarray(A)
            self._lu = scipy.linalg.lu_factor(dense, check_finite=False)
            piv = np.abs(np.diag(self._lu[0]))
            scale = np.abs(dense).max()
            if not np.all(np.isfinite(piv)) or piv.min() <= self.n * np.finfo(float).eps * scale:
                raise SingularSystemError("discrete BVP is singular to working precision")
            self._sparse = None
        else:
            try:
                self._sparse = scipy.sparse.linalg.splu(scipy.sparse.csc_matrix(A))
            except RuntimeError as exc:
                raise SingularSystemError(f"discrete BVP is singular: {exc}") from None

    def solve(self, rhs):
        if self._sparse is None:
            # getrs shifts the pivot array in place, so a shared one races across threads
            lu, piv = self._lu
            return scipy.linalg.lu_solve((lu, piv.copy()), rhs, check_finite=False)
        with self._lock:
            if self.real and np.iscomplexobj(rhs):
                re = self._sparse.solve(np.ascontiguousarray(rhs.real))
                return re + 1j * self._sparse.solve(np.ascontiguousarray(rhs.imag))
            return self._sparse.solve(rhs)


def _interior_blocks(problem: ControlProblem, y, lam, h):
    """Jacobian blocks of the interior (non-boundary) equations.

    Returns a list of ``(row_block, col_block, value)`` where ``value`` is an
    ``N x N`` array or a scalar multiple of the identity.
    """
    m = y.shape[0] - 1
    blocks = []
    eye = 1.0
    for i in range(m):
        F, G = 2 * i + 1, 2 * i + 2
        yi, li, yn, ln = 2 * i, 2 * i + 1, 2 * i + 2, 2 * i + 3
        blocks.append((F, yi, -eye))
        blocks.append((F, yn, np.eye(problem.dim) - h * problem.jac(y[i + 1])))
        blocks.append((F, ln, h / problem.gamma))
        blocks.append((G, ln, eye))
        blocks.append((G, li, -np.eye(problem.dim) + h * problem.jac_adjoint(y[i])))
        hess = h * problem.adjoint_hess_matrix(y[i], lam[i])
        if problem.tracking:
            hess = hess + h * np.eye(problem.dim)
        blocks.append((G, yi, hess))
    return blocks


def _boundary_blocks(m, coeffs, terminal_coupling=0.0):
    A_z, B_z, A_mu, B_mu = coeffs
    out = []
    if A_z != 0:
        out.append((0, 0, A_z))
    if B_z != 0:
        out.append((0, 2 * m, B_z))
    last = 2 * m + 1
    if A_mu != 0:
        out.append((last, 1, A_mu))
    if B_mu != 0:
        out.append((last, 2 * m + 1, B_mu))
    if terminal_coupling != 0:
        out.append((last, 2 * m, -terminal_coupling))
    return out


def _assemble(blocks, nblocks, N, dtype):
    rows, cols, vals = [], [], []
    r_dense = np.repeat(np.arange(N), N)
    c_dense = np.tile(np.arange(N), N)
    ar = np.arange(N)
    for rb, cb, val in blocks:
        if np.ndim(val) == 0:
            rows.append(rb * N + ar)
            cols.append(cb * N + ar)
            vals.append(np.full(N, val, dtype=dtype))
        else:
            rows.append(rb * N + r_dense)
            cols.append(cb * N + c_dense)
            vals.append(np.asarray(val, dtype=dtype).ravel())
    n = nblocks * N
    A = scipy.sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return A.tocsc()


class LinearizedBVP:
    """The derivative system linearized about a trajectory.

    Factorizations are cached per boundary-coefficient tuple, so repeated
    solves with the same boundary structure reuse one LU.
    """

    def __init__(self, problem: ControlProblem, traj: Trajectory):
        self.problem = problem
        self.traj = traj
        self.N = problem.dim
        self.m = traj.steps
        h = (traj.times[-1] - traj.times[0]) / self.m
        self._interior = _interior_blocks(problem, traj.y, traj.lam, h)
        self._factors = {}

    def _factor(self, coeffs):
        fac = self._factors.get(coeffs)
        if fac is not None:
            return fac
        real = all(c.imag == 0 for c in coeffs)
        dtype = float if real else complex
        bnd = [(r, c, v.real if real else v) for r, c, v in _boundary_blocks(self.m, coeffs)]
        A = _assemble(self._interior + bnd, 2 * (self.m + 1), self.N, dtype)
        try:
            fac = _Factorization(A)
        except SingularSystemError as exc:
            raise SingularSystemError(
                f"{exc}; boundary coefficients A_z={coeffs[0]:.6g}, B_z={coeffs[1]:.6g}, "
                f"A_mu={coeffs[2]:.6g}, B_mu={coeffs[3]:.6g}"
            ) from None
        # concurrent callers may race here; both factorizations are identical
        return self._factors.setdefault(coeffs, fac)

    def solve(self, bc: BCSpec, ledger: Optional[SolveLedger] = None, index: Optional[int] = 0):
        """Solve with boundary data ``bc``; returns ``(z_a, z_b, mu_a, mu_b)``."""
        N, m = self.N, self.m
        rhs_z = np.asarray(bc.rhs_z)
        rhs_mu = np.asarray(bc.rhs_mu)
        if rhs_z.shape[0] != N:
            raise ValueError(f"boundary data must have leading dimension {N}")
        batch = rhs_z.shape[1:] if rhs_z.ndim == 2 else ()
        fac = self._factor(bc.coefficients)
        dtype = np.result_type(rhs_z, rhs_mu, complex if not fac.real else float)
        rhs = np.zeros((2 * (m + 1) * N,) + batch, dtype=dtype)
        rhs[:N] = rhs_z
        rhs[(2 * m + 1) * N :] = rhs_mu
        u = fac.solve(rhs)
        _record(ledger, "coarse_linear", index, batch[0] if batch else 1)
        u = u.reshape((m + 1, 2, N) + batch)
        return u[0, 0], u[m, 0], u[0, 1], u[m, 1]


def linearize(problem: ControlProblem, traj: Trajectory) -> LinearizedBVP:
    return LinearizedBVP(problem, traj)


def coarse_solve_derivative(
    problem: ControlProblem,
    traj: Union[Trajectory, LinearizedBVP],
    bc: BCSpec,
    ledger: Optional[SolveLedger] = None,
    index: Optional[int] = 0,
):
    """Solve the derivative system about ``traj`` with boundary data ``bc``.

    Returns the four endpoint values ``(z(T_a), z(T_b), mu(T_a), mu(T_b))``.
    Pass a :class:`LinearizedBVP` instead of a trajectory to reuse
    factorizations across calls.
    """
    lin = traj if isinstance(traj, LinearizedBVP) else LinearizedBVP(problem, traj)
    return lin.solve(bc, ledger, index)


def _nonlinear_residual(problem, y, lam, times, Y_a, Lam_b, terminal_target):
    m = y.shape[0] - 1
    h = (times[-1] - times[0]) / m
    N = problem.dim
    r = np.empty((2 * (m + 1), N))
    r[0] = y[0] - Y_a
    gy = np.array([problem.g(y[i]) for i in range(1, m + 1)])
    r[1:-1:2] = y[1:] - y[:-1] - h * gy + (h / problem.gamma) * lam[1:]
    adj = np.array([problem.g_vjp(y[i], lam[i]) for i in range(m)])
    G = lam[1:] - lam[:-1] + h * adj
    if problem.tracking:
        yd = np.array([problem.y_desired(t) for t in times[:m]])
        G = G + h * (y[:-1] - yd)
    r[2:-1:2] = G
    r[-1] = lam[m] - Lam_b
    if terminal_target is not None:
        r[-1] -= y[m] - terminal_target
    return r


def _resample(guess: Trajectory, times):
    """Interpolate a trajectory onto ``times`` in normalized interval time."""
    src = (guess.times - guess.times[0]) / (guess.times[-1] - guess.times[0])
    dst = (times - times[0]) / (times[-1] - times[0])
    if len(src) == len(dst) and np.allclose(src, dst):
        return guess.y.astype(float).copy(), guess.lam.astype(float).copy()

    def interp(a):
        return np.stack([np.interp(dst, src, a[:, j]) for j in range(a.shape[1])], axis=1)

    return interp(guess.y), interp(guess.lam)


def _newton_bvp(problem, times, Y_a, Lam_b, guess=None, terminal_target=None):
    m = len(times) - 1
    N = problem.dim
    h = (times[-1] - times[0]) / m
    if guess is None:
        y = np.tile(np.asarray(Y_a, dtype=float), (m + 1, 1))
        lam = np.tile(np.asarray(Lam_b, dtype=float), (m + 1, 1))
    else:
        y, lam = _resample(guess, times)
    coupling = 0.0 if terminal_target is None else 1.0
    bnd = _boundary_blocks(m, (1.0, 0.0, 0.0, 1.0), coupling)

    def unpack(u):
        u = u.reshape(m + 1, 2, N)
        return u[:, 0], u[:, 1]

    def resid(y, lam):
        return _nonlinear_residual(problem, y, lam, times, Y_a, Lam_b, terminal_target)

    fac = None
    r = resid(y, lam)
    for it in range(NEWTON_MAXIT + 1):
        res = np.abs(r).max()
        if res <= NEWTON_TOL:
            if res > 0.0:
                if fac is None:
                    A = _assemble(_interior_blocks(problem, y, lam, h) + bnd, 2 * (m + 1), N, float)
                    fac = _Factorization(A)
                # chord polish with the last factorization
                dy, dl = unpack(fac.solve(r.ravel()))
                y, lam = y - dy, lam - dl
            return y, lam
        if it == NEWTON_MAXIT:
            break
        A = _assemble(_interior_blocks(problem, y, lam, h) + bnd, 2 * (m + 1), N, float)
        fac = _Factorization(A)
        dy, dl = unpack(fac.solve(r.ravel()))
        # full steps unless the residual blows up, then backtrack
        r2 = np.linalg.norm(r)
        t = 1.0
        while True:
            y_t, lam_t = y - t * dy, lam - t * dl
            r_t = resid(y_t, lam_t)
            if np.all(np.isfinite(r_t)) and np.linalg.norm(r_t) <= max(_GROWTH * (1.0 - t / 2), 1.0 - 1e-4 * t) * r2:
                break
            t *= 0.5
            if t < 1e-6:
                raise BVPConvergenceError("Newton line search failed", res)
        y, lam, r = y_t, lam_t, r_t
    raise BVPConvergenceError(f"Newton did not converge in {NEWTON_MAXIT} iterations", res)


def _grid(interval, steps):
    if steps < 1:
        raise ValueError("steps must be at least 1")
    T_a, T_b = interval
    if not T_b > T_a:
        raise ValueError("interval must satisfy T_a < T_b")
    return np.linspace(T_a, T_b, steps + 1)


def _solve_propagators(problem, Y_a, Lam_b, interval, steps, guess):
    times = _grid(interval, steps)
    Y_a, Lam_b = np.asarray(Y_a, float), np.asarray(Lam_b, float)
    try:
        y, lam = _newton_bvp(problem, times, Y_a, Lam_b, guess)
    except BVPConvergenceError:
        if guess is None:
            raise
        # a warm start from another grid can sit outside Newton's basin
        y, lam = _newton_bvp(problem, times, Y_a, Lam_b, None)
    return y[-1].copy(), lam[0].copy(), Trajectory(times, y, lam)


def coarse_solve_nonlinear(
    problem: ControlProblem,
    Y_a,
    Lam_b,
    interval: Sequence[float],
    steps: int = 2,
    ledger: Optional[SolveLedger] = None,
    index: Optional[int] = 0,
    guess: Optional[Trajectory] = None,
):
    """Coarse propagators: returns ``(P, Q, trajectory)`` where ``P ~ y(T_b)``
    and ``Q ~ lam(T_a)`` for ``y(T_a) = Y_a``, ``lam(T_b) = Lam_b``."""
    out = _solve_propagators(problem, Y_a, Lam_b, interval, steps, guess)
    _record(ledger, "coarse_nonlinear", index)
    return out


def fine_solve(
    problem: ControlProblem,
    Y_a,
    Lam_b,
    interval: Sequence[float],
    fine_steps: int = 64,
    ledger: Optional[SolveLedger] = None,
    index: Optional[int] = 0,
    guess: Optional[Trajectory] = None,
):
    """Fine propagators; same scheme as the coarse solver on a finer grid."""
    out = _solve_propagators(problem, Y_a, Lam_b, interval, fine_steps, guess)
    _record(ledger, "fine", index)
    return out


def solve_global(problem: ControlProblem, steps: int) -> Trajectory:
    """Sequential reference: the full optimality system on ``[0, T]``.

    Uses ``lam(T) = y(T) - y_target`` for final-value problems and
    ``lam(T) = 0`` for tracking.
    """
    times = _grid((0.0, problem.T), steps)
    N = problem.dim
    target = problem.objective.y_target if isinstance(problem.objective, FinalValue) else None
    y, lam = _newton_bvp(problem, times, problem.y_init, np.zeros(N), None, target)
    return Trajectory(times, y, lam)
