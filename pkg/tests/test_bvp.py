import numpy as np
import pytest

from paraopt.bvp import (
    BCSpec,
    BVPConvergenceError,
    LinearizedBVP,
    SolveLedger,
    Trajectory,
    coarse_solve_derivative,
    coarse_solve_nonlinear,
    fine_solve,
    solve_global,
)
from paraopt.model import FinalValue, LinearModel, burgers_problem, heat_problem
from paraopt.precond import propagator_blocks

from .conftest import CubicDecay, rel_err, scalar_model


def test_no_dynamics_no_coupling():
    p = LinearModel([[0.0]], 1e12, 1.0, [0.0], FinalValue(np.zeros(1)))
    P, Q, _ = coarse_solve_nonlinear(p, [2.5], [0.0], (0.0, 0.5))
    np.testing.assert_allclose(P, [2.5], atol=1e-12)
    np.testing.assert_allclose(Q, [0.0], atol=1e-12)


@pytest.mark.parametrize("k,gamma,h", [(-1.0, 1.0, 0.5), (0.7, 0.2, 0.25), (-3.0, 5.0, 0.1)])
def test_scalar_one_step_closed_form(k, gamma, h):
    p = scalar_model(k=k, gamma=gamma)
    Ya, Lb = 1.3, -0.4
    P, Q, _ = coarse_solve_nonlinear(p, [Ya], [Lb], (0.0, h), steps=1)
    # (y1 - y0)/h = k y1 - l1/gamma,  (l1 - l0)/h = -k l0
    P_exact = (Ya - h * Lb / gamma) / (1 - h * k)
    Q_exact = Lb / (1 - h * k)
    assert abs(P[0] - P_exact) <= 1e-12 * max(1, abs(P_exact))
    assert abs(Q[0] - Q_exact) <= 1e-12 * max(1, abs(Q_exact))


def test_cubic_zero_fixed_point():
    p = CubicDecay(3, 1.0, 1.0, np.zeros(3), FinalValue(np.zeros(3)))
    for solver, steps in ((coarse_solve_nonlinear, 2), (fine_solve, 64)):
        P, Q, _ = solver(p, np.zeros(3), np.zeros(3), (0.0, 0.25), steps)
        assert not np.any(P) and not np.any(Q)


def test_cubic_nonlinear_residual_vanishes():
    p = CubicDecay(2, 0.5, 1.0, np.ones(2), FinalValue(np.zeros(2)))
    P, Q, traj = coarse_solve_nonlinear(p, [1.0, -0.5], [0.3, 0.1], (0.0, 0.5), steps=4)
    h = 0.125
    y, lam = traj.y, traj.lam
    r1 = y[1:] - y[:-1] - h * p.g(y[1:].T).T + (h / p.gamma) * lam[1:]
    r2 = lam[1:] - lam[:-1] + h * np.array([p.g_vjp(y[i], lam[i]) for i in range(4)])
    assert np.abs(r1).max() <= 1e-10 and np.abs(r2).max() <= 1e-10


def test_fine_equals_coarse_at_same_steps(burgers8):
    Ya, Lb = burgers8.y_init, 0.1 * np.ones(8)
    a = coarse_solve_nonlinear(burgers8, Ya, Lb, (0.0, 0.05), 8)
    b = fine_solve(burgers8, Ya, Lb, (0.0, 0.05), 8)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def _analytic(k, gamma, T, Ya, Lb, t):
    lam = Lb * np.exp(k * (T - t))
    y = np.exp(k * t) * Ya - (Lb / gamma) * np.exp(k * (t + T)) * (1 - np.exp(-2 * k * t)) / (2 * k)
    return y, lam


def test_fine_solve_first_order_convergence():
    k, gamma, T, Ya, Lb = -1.5, 0.5, 1.0, 1.0, 0.8
    p = scalar_model(k=k, gamma=gamma, T=T)
    y_ex, lam_ex = _analytic(k, gamma, T, Ya, Lb, np.array([T, 0.0]))
    errs = []
    for m in (16, 32, 64, 128):
        P, Q, _ = fine_solve(p, [Ya], [Lb], (0.0, T), m)
        errs.append(abs(P[0] - y_ex[0]) + abs(Q[0] - lam_ex[1]))
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    assert np.all(np.diff(errs) < 0)
    assert np.all((ratios > 1.8) & (ratios < 2.2)), ratios


class _Exponential(CubicDecay):
    """``g(y) = exp(y)``: implicit Euler from a large state has no real solution."""

    def g(self, y):
        return np.exp(np.asarray(y))

    def g_jvp(self, y, z):
        return self._scale(np.exp(np.asarray(y)), z)

    g_vjp = g_jvp

    def adjoint_hess(self, y, lam, z):
        return self._scale(np.exp(np.asarray(y)) * np.asarray(lam), z)


def test_nonconvergence_is_reported():
    q = _Exponential(1, 1.0, 1.0, [0.0], FinalValue(np.zeros(1)))
    with pytest.raises(BVPConvergenceError) as err:
        coarse_solve_nonlinear(q, [10.0], [0.0], (0.0, 1.0), 2)
    assert err.value.residual > 1e-10


def _traj(problem, steps=2, span=(0.0, 0.25), seed=0):
    rng = np.random.default_rng(seed)
    _, _, traj = coarse_solve_nonlinear(problem, rng.standard_normal(problem.dim), rng.standard_normal(problem.dim), span, steps)
    return traj


def test_derivative_homogeneous_is_zero(heat8):
    out = coarse_solve_derivative(heat8, _traj(heat8), BCSpec.standard(np.zeros(8), np.zeros(8)))
    assert all(not np.any(o) for o in out)


def test_derivative_linear_in_data(burgers8, rng):
    lin = LinearizedBVP(burgers8, _traj(burgers8))
    dy, dl = rng.standard_normal((2, 8))
    one = lin.solve(BCSpec.standard(dy, dl))
    two = lin.solve(BCSpec.standard(2 * dy, 2 * dl))
    for a, b in zip(one, two):
        assert rel_err(b, 2 * a) <= 1e-14


@pytest.mark.parametrize("problem", [heat_problem(4), burgers_problem(6)], ids=["heat", "burgers"])
def test_derivative_matches_finite_differences_of_nonlinear_solve(problem, rng):
    span = (0.0, 0.1)
    Ya, Lb = 0.5 * rng.standard_normal((2, problem.dim))
    _, _, traj = coarse_solve_nonlinear(problem, Ya, Lb, span)
    dy, dl = rng.standard_normal((2, problem.dim))
    _, zb, mua, _ = coarse_solve_derivative(problem, traj, BCSpec.standard(dy, dl))
    h = 1e-7 if isinstance(problem, LinearModel) else 1e-6
    Pp, Qp, _ = coarse_solve_nonlinear(problem, Ya + h * dy, Lb + h * dl, span)
    Pm, Qm, _ = coarse_solve_nonlinear(problem, Ya - h * dy, Lb - h * dl, span)
    assert rel_err((Pp - Pm) / (2 * h), zb) <= 1e-6
    assert rel_err((Qp - Qm) / (2 * h), mua) <= 1e-6


def test_derivative_matches_dense_propagator_blocks(heat8, rng):
    lin = LinearizedBVP(heat8, _traj(heat8))
    P_y, P_lam, Q_y, Q_lam = propagator_blocks(lin)
    for _ in range(5):
        dy, dl = rng.standard_normal((2, 8))
        _, zb, mua, _ = lin.solve(BCSpec.standard(dy, dl))
        assert rel_err(zb, P_y @ dy + P_lam @ dl) <= 1e-11
        assert rel_err(mua, Q_y @ dy + Q_lam @ dl) <= 1e-11


@pytest.mark.parametrize("problem", [heat_problem(8), burgers_problem(8, objective="tracking")], ids=["heat", "burgers"])
def test_combined_solve_equals_sum_of_separate_solves(problem, rng):
    lin = LinearizedBVP(problem, _traj(problem))
    dy, dl = rng.standard_normal((2, problem.dim))
    both = lin.solve(BCSpec.standard(dy, dl))
    first = lin.solve(BCSpec.standard(dy, np.zeros_like(dl)))
    second = lin.solve(BCSpec.standard(np.zeros_like(dy), dl))
    for c, a, b in zip(both, first, second):
        assert rel_err(c, a + b) <= 1e-12


def test_adjusted_boundary_rows_hold(burgers8, rng):
    lin = LinearizedBVP(burgers8, _traj(burgers8))
    d = np.exp(1j * 2.1)
    a = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    b = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    za, zb, mua, mub = lin.solve(BCSpec.adjusted(d, a, b))
    assert rel_err(-np.conj(d) * za + zb, a) <= 1e-11
    assert rel_err(mua - d * mub, b) <= 1e-11


def test_batched_solve_matches_columns(heat8, rng):
    lin = LinearizedBVP(heat8, _traj(heat8))
    DY, DL = rng.standard_normal((2, 8, 3))
    ledger = SolveLedger(2)
    za, zb, mua, mub = lin.solve(BCSpec.standard(DY, DL), ledger, 1)
    assert ledger.counts("coarse_linear").tolist() == [0, 3]
    for j in range(3):
        _, zb_j, mua_j, _ = lin.solve(BCSpec.standard(DY[:, j], DL[:, j]))
        np.testing.assert_allclose(zb[:, j], zb_j, atol=1e-13)
        np.testing.assert_allclose(mua[:, j], mua_j, atol=1e-13)


def test_each_call_increments_one_counter(burgers8):
    ledger = SolveLedger(3)
    traj = _traj(burgers8)
    coarse_solve_nonlinear(burgers8, burgers8.y_init, np.zeros(8), (0.0, 0.1), 2, ledger, 2)
    assert ledger.snapshot()["coarse_nonlinear"].tolist() == [0, 0, 1]
    fine_solve(burgers8, burgers8.y_init, np.zeros(8), (0.0, 0.1), 16, ledger, 0)
    coarse_solve_derivative(burgers8, traj, BCSpec.standard(np.ones(8), np.zeros(8)), ledger, 1)
    snap = ledger.snapshot()
    assert snap["fine"].tolist() == [1, 0, 0]
    assert snap["coarse_linear"].tolist() == [0, 1, 0]
    assert snap["coarse_nonlinear"].tolist() == [0, 0, 1]


def test_ledger_broadcast_and_threads():
    from concurrent.futures import ThreadPoolExecutor

    ledger = SolveLedger(4)
    ledger.add("fine", None, 2)
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda i: ledger.add("coarse_linear", i % 4), range(4000)))
    assert ledger.counts("fine").tolist() == [2, 2, 2, 2]
    assert ledger.counts("coarse_linear").tolist() == [1000] * 4
    assert ledger.max("coarse_linear") == 1000 and ledger.total("coarse_linear") == 4000


def test_bcspec_validation():
    with pytest.raises(ValueError):
        BCSpec(0.0, 0.0, np.zeros(2), 1.0, 0.0, np.zeros(2))
    with pytest.raises(ValueError):
        BCSpec(1.0, 0.0, np.zeros(2), 0.0, 0.0, np.zeros(2))


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), np.zeros((2, 1)), np.zeros((2, 1)))


def test_global_solve_satisfies_terminal_condition(heat8):
    traj = solve_global(heat8, 40)
    np.testing.assert_allclose(traj.lam[-1], traj.y[-1] - heat8.objective.y_target, atol=1e-12)
    np.testing.assert_array_equal(traj.y[0], heat8.y_init)
