"""Optimal-control problem definitions.

A problem pairs dynamics ``y' = g(y) + u`` with either a final-value
objective ``1/2 |y(T) - y_target|^2`` or a tracking objective
``1/2 int |y - y_d(t)|^2 dt``, both regularized by ``gamma/2 int |u|^2``.
The optimal control is ``u = -lambda/gamma`` where ``lambda`` is the adjoint.

Every derivative action accepts either a vector of length ``N`` or an
``N x k`` matrix whose columns are acted upon independently, so Jacobian
matrices can be formed as ``g_jvp(y, I)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np


@dataclass(frozen=True)
class FinalValue:
    y_target: np.ndarray


@dataclass(frozen=True)
class Tracking:
    y_d: Callable[[float], np.ndarray]


Objective = Union[FinalValue, Tracking]


class ControlProblem:
    """Base class: subclasses define ``g`` and its derivative actions."""

    def __init__(self, dim: int, gamma: float, T: float, y_init, objective: Objective):
        if gamma <= 0:
            raise ValueError("gamma must be positive")
        if T <= 0:
            raise ValueError("T must be positive")
        y_init = np.asarray(y_init, dtype=float)
        if y_init.shape != (dim,):
            raise ValueError(f"y_init must have shape ({dim},)")
        if isinstance(objective, FinalValue):
            if np.shape(objective.y_target) != (dim,):
                raise ValueError(f"y_target must have shape ({dim},)")
        elif not isinstance(objective, Tracking):
            raise TypeError("objective must be FinalValue or Tracking")
        self.dim = dim
        self.gamma = float(gamma)
        self.T = float(T)
        self.y_init = y_init
        self.objective = objective

    @property
    def tracking(self) -> bool:
        return isinstance(self.objective, Tracking)

    def g(self, y):
        raise NotImplementedError

    def g_jvp(self, y, z):
        """``g'(y) z``."""
        raise NotImplementedError

    def g_vjp(self, y, w):
        """``g'(y)^* w``."""
        raise NotImplementedError

    def adjoint_hess(self, y, lam, z):
        """Derivative of ``y -> g'(y)^* lam`` applied to ``z``."""
        raise NotImplementedError

    def jac(self, y) -> np.ndarray:
        return self.g_jvp(y, np.eye(self.dim))

    def jac_adjoint(self, y) -> np.ndarray:
        return self.g_vjp(y, np.eye(self.dim))

    def adjoint_hess_matrix(self, y, lam) -> np.ndarray:
        return self.adjoint_hess(y, lam, np.eye(self.dim))

    def y_desired(self, t: float) -> np.ndarray:
        return np.asarray(self.objective.y_d(t), dtype=float)


class LinearModel(ControlProblem):
    """``g(y) = K y`` for a constant real matrix ``K``."""

    def __init__(self, K, gamma, T, y_init, objective):
        K = np.asarray(K, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("K must be square")
        super().__init__(K.shape[0], gamma, T, y_init, objective)
        self.K = K

    def g(self, y):
        return self.K @ y

    def g_jvp(self, y, z):
        return self.K @ z

    def g_vjp(self, y, w):
        return self.K.T @ w

    def adjoint_hess(self, y, lam, z):
        return np.zeros_like(np.asarray(z, dtype=float))


def heat_matrix(N: int) -> np.ndarray:
    """``N^2 * tridiag(1, -2, 1)``."""
    K = -2.0 * np.eye(N) + np.eye(N, k=1) + np.eye(N, k=-1)
    return K * N**2


@dataclass(frozen=True)
class BurgersOperators:
    D1: np.ndarray
    D2: np.ndarray
    nodes: np.ndarray


def cheb(n: int):
    """Chebyshev-Gauss-Lobatto points ``cos(pi j / n)`` and differentiation matrix."""
    if n == 0:
        return np.zeros((1, 1)), np.array([1.0])
    x = np.cos(np.pi * np.arange(n + 1) / n)
    c = np.ones(n + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n + 1)
    dX = x[:, None] - x[None, :]
    D = np.outer(c, 1.0 / c) / (dX + np.eye(n + 1))
    D -= np.diag(D.sum(axis=1))
    return D, x


def chebyshev_setup(N_interior: int) -> BurgersOperators:
    """Interior differentiation operators on ``[0, 1]`` with Dirichlet ends.

    The ``N_interior + 2`` Lobatto nodes are mapped to ``[0, 1]`` in increasing
    order. ``D2`` is the square of the full first-derivative matrix, restricted
    to interior rows and columns afterwards.
    """
    if N_interior < 2:
        raise ValueError("N_interior must be at least 2")
    D, x = cheb(N_interior + 1)
    # x -> (1 - x)/2 flips the ordering to increasing and scales by -1/2
    nodes = (1.0 - x) / 2.0
    D1_full = -2.0 * D
    D2_full = D1_full @ D1_full
    inner = slice(1, -1)
    return BurgersOperators(D1_full[inner, inner], D2_full[inner, inner], nodes[inner])


class BurgersModel(ControlProblem):
    """Pseudo-spectral viscous Burgers, ``g(y) = -1/2 D1 (y*y) + nu D2 y``."""

    def __init__(self, ops: BurgersOperators, nu, gamma, T, y_init, objective):
        if nu <= 0:
            raise ValueError("nu must be positive")
        super().__init__(ops.D1.shape[0], gamma, T, y_init, objective)
        self.ops = ops
        self.nu = float(nu)
        self.D1 = ops.D1
        self.D2 = ops.D2
        self.nodes = ops.nodes

    def g(self, y):
        return burgers_rhs(self, y)

    def g_jvp(self, y, z):
        return burgers_jvp(self, y, z)

    def g_vjp(self, y, w):
        return burgers_vjp(self, y, w)

    def adjoint_hess(self, y, lam, z):
        return burgers_adjoint_hess(self, y, lam, z)


def _col(y, z):
    # broadcast a state over the columns of z
    return y[:, None] if np.ndim(z) == 2 else y


def burgers_rhs(m: BurgersModel, y):
    y = np.asarray(y)
    return -0.5 * (m.D1 @ (y * y)) + m.nu * (m.D2 @ y)


def burgers_jvp(m: BurgersModel, y, z):
    y = np.asarray(y)
    return -(m.D1 @ (_col(y, z) * z)) + m.nu * (m.D2 @ z)


def burgers_vjp(m: BurgersModel, y, w):
    y = np.asarray(y)
    return -_col(y, w) * (m.D1.T @ w) + m.nu * (m.D2.T @ w)


def burgers_adjoint_hess(m: BurgersModel, y, lam, z):
    s = m.D1.T @ np.asarray(lam)
    return -_col(s, z) * z


@dataclass(frozen=True)
class SmoothSetup:
    """``f1(x) = sin(4 pi x)``, targets zero, ``gamma = 1``."""

    gamma: float = 1.0

    def initial(self, x):
        return np.sin(4.0 * np.pi * np.asarray(x, dtype=float))

    def target(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class NonsmoothSetup:
    """``f2 = indicator of (0, 1/2]``, targets equal to ``f2``, ``gamma = 0.05``."""

    gamma: float = 0.05

    def initial(self, x):
        x = np.asarray(x, dtype=float)
        return ((x > 0.0) & (x <= 0.5)).astype(float)

    def target(self, x):
        return self.initial(x)


Setup = Union[SmoothSetup, NonsmoothSetup]


def sample_initial(setup: Setup, nodes) -> np.ndarray:
    return setup.initial(nodes)


def make_objective(kind: str, target: np.ndarray) -> Objective:
    if kind == "final_value":
        return FinalValue(np.asarray(target, dtype=float))
    if kind == "tracking":
        target = np.asarray(target, dtype=float)
        return Tracking(lambda t: target)
    raise ValueError(f"unknown objective {kind!r}")


def burgers_problem(
    N: int = 32,
    setup: Setup = SmoothSetup(),
    objective: str = "final_value",
    gamma: Optional[float] = None,
    nu: float = 0.01,
    T: float = 1.0,
) -> BurgersModel:
    """Burgers control problem on ``N`` interior Chebyshev nodes."""
    ops = chebyshev_setup(N)
    gamma = setup.gamma if gamma is None else gamma
    return BurgersModel(
        ops, nu, gamma, T, sample_initial(setup, ops.nodes), make_objective(objective, setup.target(ops.nodes))
    )


def heat_problem(
    N: int = 8,
    setup: Setup = SmoothSetup(),
    objective: str = "final_value",
    gamma: Optional[float] = None,
    T: float = 1.0,
) -> LinearModel:
    """Linear problem with ``K = heat_matrix(N)`` on a uniform interior grid."""
    x = np.arange(1, N + 1) / (N + 1)
    gamma = setup.gamma if gamma is None else gamma
    return LinearModel(heat_matrix(N), gamma, T, setup.initial(x), make_objective(objective, setup.target(x)))
