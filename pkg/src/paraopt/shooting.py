"""Multiple-shooting matching system and its inexact Newton solver.

The unknowns are the interface values ``Y_1..Y_L`` and ``Lam_1..Lam_L`` on the
uniform grid ``T_l = l*T/L``. With subinterval propagators ``P`` (state at the
right end) and ``Q`` (adjoint at the left end), the matching residual is

    Y_l   - P(Y_{l-1}, Lam_l)        l = 1..L,    Y_0 = y_init
    Lam_l - Q(Y_l, Lam_{l+1})        l = 1..L-1
    Lam_L - (Y_L - y_target)         final value  (Lam_L for tracking)

Newton steps use the Jacobian of the same system built from coarse
propagators, applied matrix-free through derivative solves.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ._parallel import pmap
from .bvp import (
    BCSpec,
    BVPConvergenceError,
    LinearizedBVP,
    SolveLedger,
    coarse_solve_nonlinear,
    fine_solve,
)
from .model import ControlProblem, FinalValue
from .numkit import LinearMap, dense_solve, gmres
from .precond import (
    INNER_METHODS,
    DiagonalPreconditioner,
    InnerSolveError,
    averaged_context,
    circulant_spectrum,
)

log = logging.getLogger(__name__)


class SubintervalError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"subinterval {index}: {cause}")
        self.index = index


@dataclass(frozen=True)
class ShootingState:
    """Interface values; ``Y`` and ``Lam`` are ``L x N`` arrays."""

    Y: np.ndarray
    Lam: np.ndarray

    def __post_init__(self):
        if self.Y.ndim != 2 or self.Y.shape != self.Lam.shape or self.Y.shape[0] < 1:
            raise ValueError("Y and Lam must both be L x N with L >= 1")

    @property
    def L(self) -> int:
        return self.Y.shape[0]

    @property
    def N(self) -> int:
        return self.Y.shape[1]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.Y.ravel(), self.Lam.ravel()])

    @classmethod
    def from_flat(cls, x, L: int, N: int) -> "ShootingState":
        x = np.asarray(x).reshape(2, L, N)
        return cls(x[0].copy(), x[1].copy())


def _intervals(problem: ControlProblem, L: int):
    dT = problem.T / L
    return [(l * dT, (l + 1) * dT) for l in range(L)]


def _terminal_row(problem: ControlProblem, Y_L, Lam_L):
    if isinstance(problem.objective, FinalValue):
        return Lam_L - (Y_L - problem.objective.y_target)
    return Lam_L


def propagate(
    problem: ControlProblem,
    state: ShootingState,
    steps: int,
    fine: bool = True,
    ledger: Optional[SolveLedger] = None,
    workers: Optional[int] = None,
    guesses=None,
):
    """Run the subinterval propagators; returns per-subinterval ``(P, Q, traj)``.

    ``guesses`` optionally holds one trajectory per subinterval to start the
    nonlinear solves from (any grid; it is interpolated).
    """
    L = state.L
    spans = _intervals(problem, L)
    solver = fine_solve if fine else coarse_solve_nonlinear

    def work(l):
        Y_prev = problem.y_init if l == 0 else state.Y[l - 1]
        guess = guesses[l] if guesses is not None else None
        try:
            return solver(problem, Y_prev, state.Lam[l], spans[l], steps, ledger, l, guess)
        except (BVPConvergenceError, np.linalg.LinAlgError) as exc:
            raise SubintervalError(l, exc) from exc

    return pmap(work, L, workers)


def residual(
    problem: ControlProblem,
    state: ShootingState,
    fine_steps: int = 64,
    ledger: Optional[SolveLedger] = None,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Matching residual with fine propagators, flattened like the state.

    Pass ``fine_steps`` equal to the coarse step count to get the coarse
    residual.
    """
    props = propagate(problem, state, fine_steps, True, ledger, workers)
    return _assemble_residual(problem, state, props)


def coarse_residual(problem, state, coarse_steps: int = 2, workers=None) -> np.ndarray:
    """Matching residual built from the coarse propagators (no accounting)."""
    props = propagate(problem, state, coarse_steps, False, None, workers)
    return _assemble_residual(problem, state, props)


def _assemble_residual(problem, state, props):
    L = state.L
    P = np.array([p[0] for p in props])
    Q = np.array([p[1] for p in props])
    fY = state.Y - P
    fL = np.empty_like(state.Lam)
    fL[:-1] = state.Lam[:-1] - Q[1:]
    fL[-1] = _terminal_row(problem, state.Y[L - 1], state.Lam[L - 1])
    return np.concatenate([fY.ravel(), fL.ravel()])


@dataclass
class JacobianContext:
    """Coarse linearizations, one per subinterval, at the current iterate."""

    problem: ControlProblem
    lins: List[LinearizedBVP]

    @property
    def L(self) -> int:
        return len(self.lins)


def jacobian_context(
    problem: ControlProblem,
    state: ShootingState,
    coarse_steps: int = 2,
    ledger: Optional[SolveLedger] = None,
    workers: Optional[int] = None,
    guesses=None,
) -> JacobianContext:
    props = propagate(problem, state, coarse_steps, False, ledger, workers, guesses)
    return JacobianContext(problem, [LinearizedBVP(problem, traj) for _, _, traj in props])


def jacobian_apply(
    problem: ControlProblem,
    ctx: JacobianContext,
    v,
    ledger: Optional[SolveLedger] = None,
    combined: bool = True,
    workers: Optional[int] = None,
) -> np.ndarray:
    """Product with the coarse matching Jacobian.

    With ``combined=True`` each subinterval needs one derivative solve with
    ``z(T_{l-1}) = dY_{l-1}`` and ``mu(T_l) = dLam_l``; otherwise the two
    contributions are solved for separately.
    """
    L = ctx.L
    N = problem.dim
    v = np.asarray(v)
    dY, dL = v.reshape(2, L, N)
    zero = np.zeros(N, dtype=v.dtype)

    def work(l):
        dy_prev = zero if l == 0 else dY[l - 1]
        lin = ctx.lins[l]
        if combined:
            _, zb, mua, _ = lin.solve(BCSpec.standard(dy_prev, dL[l]), ledger, l)
            return zb, mua
        _, zb1, mua1, _ = lin.solve(BCSpec.standard(dy_prev, zero), ledger, l)
        _, zb2, mua2, _ = lin.solve(BCSpec.standard(zero, dL[l]), ledger, l)
        return zb1 + zb2, mua1 + mua2

    parts = pmap(work, L, workers)
    Pv = np.array([p[0] for p in parts])
    Qv = np.array([p[1] for p in parts])
    outY = dY - Pv
    outL = np.empty_like(Qv)
    outL[:-1] = dL[:-1] - Qv[1:]
    if isinstance(problem.objective, FinalValue):
        outL[-1] = dL[-1] - dY[-1]
    else:
        outL[-1] = dL[-1]
    return np.concatenate([outY.ravel(), outL.ravel()])


def _implicit_euler_step(problem, y, h):
    w = y.copy()
    for _ in range(50):
        r = w - h * problem.g(w) - y
        if np.abs(r).max() <= 1e-13 * (1.0 + np.abs(y).max()):
            return w
        w = w - dense_solve(np.eye(problem.dim) - h * problem.jac(w), r)
    raise BVPConvergenceError("implicit Euler step did not converge", float(np.abs(r).max()))


def initial_guess(problem: ControlProblem, L: int, coarse_steps: int = 2) -> ShootingState:
    """Uncontrolled coarse forward sweep.

    ``Y`` comes from implicit Euler on ``y' = g(y)``. ``Lam`` is zero for
    tracking and the constant ``Y_L - y_target`` for final-value problems.
    """
    h = problem.T / L / coarse_steps
    Y = np.empty((L, problem.dim))
    y = problem.y_init.astype(float)
    for l in range(L):
        for _ in range(coarse_steps):
            y = _implicit_euler_step(problem, y, h)
        Y[l] = y
    if isinstance(problem.objective, FinalValue):
        Lam = np.tile(Y[-1] - problem.objective.y_target, (L, 1))
    else:
        Lam = np.zeros_like(Y)
    return ShootingState(Y, Lam)


@dataclass
class NewtonOptions:
    fine_steps: int = 64
    coarse_steps: int = 2
    newton_tol: float = 1e-8
    max_newton: int = 50
    gmres_tol: float = 1e-8
    max_gmres: int = 200
    precond: str = "none"
    inner_method: str = "adjusted_bc"
    alpha: complex = 1.0
    inner_tol: float = 1e-10
    max_inner: int = 200
    combined_derivatives: bool = True
    direct_cap: int = 256
    workers: Optional[int] = None
    initial: Optional[ShootingState] = None

    def __post_init__(self):
        if self.precond not in ("none", "diag"):
            raise ValueError(f"precond must be 'none' or 'diag', got {self.precond!r}")
        if self.inner_method not in INNER_METHODS:
            raise ValueError(f"inner_method must be one of {INNER_METHODS}")
        if self.fine_steps < self.coarse_steps or self.coarse_steps < 1:
            raise ValueError("need 1 <= coarse_steps <= fine_steps")
        if self.newton_tol <= 0 or self.gmres_tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if abs(abs(complex(self.alpha)) - 1.0) > 1e-14:
            raise ValueError("alpha must have unit modulus")


@dataclass(frozen=True)
class NewtonStep:
    k: int
    residual_inf: float
    gmres_iters: int
    gmres_converged: bool
    ledger: dict


@dataclass
class NewtonResult:
    """Outcome of :func:`newton_solve`.

    ``state`` is the iterate with the smallest residual seen. ``error`` is set
    when a subinterval or inner solve failed and the iteration was abandoned.
    """

    state: ShootingState
    ledger: SolveLedger
    history: List[NewtonStep] = field(default_factory=list)
    converged: bool = False
    error: Optional[str] = None

    def __iter__(self):
        # allows ``state, ledger, history = newton_solve(...)``
        return iter((self.state, self.ledger, self.history))


_SOLVER_ERRORS = (SubintervalError, InnerSolveError, BVPConvergenceError, np.linalg.LinAlgError)


_MIN_DAMPING = 1.0 / 64


def _damped_update(state, step, trajs, evaluate):
    """``x - t*s`` with the largest ``t`` in 1, 1/2, ... whose propagators exist.

    Steps are only shortened when a subinterval solve breaks down, never to
    force a residual decrease.
    """
    L, N = state.L, state.N
    t = 1.0
    while True:
        trial = ShootingState.from_flat(state.flatten() - t * step, L, N)
        try:
            f, new_trajs = evaluate(trial, trajs)
            return trial, f, new_trajs
        except SubintervalError as exc:
            t *= 0.5
            if t < _MIN_DAMPING:
                raise
            log.info("subinterval solve failed (%s); shortening step to %g", exc, t)


def newton_solve(problem: ControlProblem, L: int, opts: Optional[NewtonOptions] = None) -> NewtonResult:
    """Inexact Newton on the matching system with GMRES inner solves.

    Each step refreshes the coarse linearizations at the current iterate,
    solves ``J s = f`` with (optionally right-preconditioned) GMRES and updates
    ``x <- x - s``. Stops when ``||f||_inf <= newton_tol``.
    """
    opts = opts or NewtonOptions()
    N = problem.dim
    ledger = SolveLedger(L)
    state = opts.initial if opts.initial is not None else initial_guess(problem, L, opts.coarse_steps)
    if state.Y.shape != (L, N):
        raise ValueError(f"initial state must be {L} x {N}")
    spectrum = circulant_spectrum(L, opts.alpha) if opts.precond == "diag" else None
    dT = problem.T / L
    history: List[NewtonStep] = []
    best, best_norm = state, np.inf

    def evaluate(state, guesses):
        props = propagate(problem, state, opts.fine_steps, True, ledger, opts.workers, guesses)
        return _assemble_residual(problem, state, props), [t for _, _, t in props]

    try:
        # fine trajectories of the latest iterate warm-start the next solves
        f, trajs = evaluate(state, None)
        fnorm = float(np.abs(f).max())
        history.append(NewtonStep(0, fnorm, 0, True, ledger.snapshot()))
        best, best_norm = state, fnorm
        log.info("newton 0: |f|_inf = %.3e", fnorm)

        for k in range(1, opts.max_newton + 1):
            if not np.isfinite(fnorm) or fnorm <= opts.newton_tol:
                break
            ctx = jacobian_context(problem, state, opts.coarse_steps, ledger, opts.workers, trajs)
            A = LinearMap(
                2 * L * N,
                2 * L * N,
                lambda v: jacobian_apply(problem, ctx, v, ledger, opts.combined_derivatives, opts.workers),
            )
            M = None
            if spectrum is not None:
                actx = averaged_context(problem, state.Y, state.Lam, dT, opts.coarse_steps, ledger, opts.direct_cap)
                M = DiagonalPreconditioner(
                    actx, spectrum, opts.inner_method, ledger, opts.inner_tol, opts.max_inner, opts.workers
                )
            # absolute floor: no point solving far below the Newton tolerance
            res = gmres(A, f, tol=opts.gmres_tol, maxit=opts.max_gmres, M_right=M, atol=1e-3 * opts.newton_tol)
            if not res.converged:
                log.warning("newton %d: GMRES stopped after %d iterations", k, res.iters)
            ledger.add_gmres(res.iters)
            ledger.add_newton()
            state, f, trajs = _damped_update(state, res.x.real, trajs, evaluate)
            fnorm = float(np.abs(f).max())
            history.append(NewtonStep(k, fnorm, res.iters, res.converged, ledger.snapshot()))
            if fnorm < best_norm:
                best, best_norm = state, fnorm
            log.info("newton %d: |f|_inf = %.3e, gmres %d", k, fnorm, res.iters)
    except _SOLVER_ERRORS as exc:
        log.error("newton iteration abandoned: %s", exc)
        return NewtonResult(best, ledger, history, False, str(exc))

    return NewtonResult(best, ledger, history, bool(best_norm <= opts.newton_tol))
