"""Independent reference solvers for tiny instances.

* :func:`brute_force_joint` enumerates every phase field on a small 1D grid
  and solves the density problem for each with the stepper's own density
  solver, so only the phase search of :func:`~verigin.stepper.jko_step` is
  under test.
* :func:`prox_oracle` minimizes the per-cell proximal objective by a
  bracketed root solve of its stationarity condition.
* :func:`fd_gradient_check` compares a finite-difference derivative of the
  internal energy along a transport perturbation with its closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .energy import f
from .grid import check_field, integrate
from .stepper import solve_density


@dataclass(frozen=True)
class EnumerationBudget:
    """Largest cell count that may be enumerated, and the seeds of a sweep."""

    max_cells: int = 12
    seeds: tuple = ()

    def __post_init__(self):
        if not 1 <= self.max_cells <= 20:
            raise ValueError("max_cells must lie in [1, 20]")


@dataclass
class JointOptimum:
    chi: np.ndarray
    rho: np.ndarray
    objective: float
    objectives: np.ndarray    # per enumerated phase, index = binary code


def all_phases(n):
    """All binary fields of length ``n``; row ``k`` has cell ``i`` set iff bit ``i`` of ``k`` is."""
    codes = np.arange(2 ** n)
    return ((codes[:, None] >> np.arange(n)[None, :]) & 1).astype(np.int8)


def brute_force_joint(grid, rho_prev, cfg, budget=None, chunk=256):
    """Global minimizer of the entropic step objective over all phase fields.

    Every phase is paired with the density that minimizes the step objective
    at that phase; ties go to the lowest binary code.

    Raises
    ------
    ValueError
        If the grid is not 1D or has more than ``budget.max_cells`` cells.
    """
    budget = EnumerationBudget() if budget is None else budget
    if grid.dim != 1:
        raise ValueError("brute force is implemented for 1D grids")
    if grid.size > budget.max_cells:
        raise ValueError(f"{grid.size} cells exceed the enumeration budget of {budget.max_cells}")
    rho_prev = check_field(grid, rho_prev, "rho_prev")
    cfg = cfg.resolved(grid) if cfg.outer_tol is None else cfg
    chis = all_phases(grid.size)
    objs, rhos = [], []
    for start in range(0, len(chis), chunk):
        sol = solve_density(grid, rho_prev, chis[start:start + chunk], cfg)
        objs.append(np.atleast_1d(sol.objective))
        rhos.append(sol.rho.reshape(-1, grid.size))
    objs = np.concatenate(objs)
    rhos = np.concatenate(rhos)
    k = int(np.argmin(objs))
    return JointOptimum(chis[k], rhos[k], float(objs[k]), objs)


def prox_objective(s, q, eps_p, chi, m):
    """``f(s) - chi s + eps_p (s log(s/q) - s + q)``."""
    return f(s, m) - chi * s + eps_p * (s * math.log(s / q) - s + q)


def prox_oracle(q, eps_p, chi, m, tol=1e-12):
    """Minimizer of :func:`prox_objective` over ``s > 0``.

    In ``t = log s`` the stationarity condition
    ``f'(e**t) - chi + eps_p (t - log q) = 0`` is increasing, so its root is
    found by Brent's method inside a bracket grown by doubling from ``log q``.
    """
    if not (q > 0 and eps_p > 0):
        raise ValueError("q and eps_p must be positive")
    lq = math.log(q)

    def g(t):
        fp = t + 1.0 if m == 1 else m / (m - 1) * math.exp(min((m - 1) * t, 700.0))
        return fp - chi + eps_p * (t - lq)

    lo, hi, w = lq - 1.0, lq + 1.0, 1.0
    while g(lo) > 0:
        w *= 2.0
        lo = lq - w
    w = 1.0
    while g(hi) < 0:
        w *= 2.0
        hi = lq + w
    t = optimize.brentq(g, lo, hi, xtol=tol * max(1.0, abs(lq)), rtol=4 * np.finfo(float).eps,
                        maxiter=500)
    return math.exp(t)


@dataclass(frozen=True)
class FDReport:
    fd: float
    analytic: float
    step: float

    @property
    def error(self):
        return abs(self.fd - self.analytic)


def pushed_internal_energy(grid, rho, field_, m, s):
    """``int f(rho_s)`` for ``rho_s`` the push-forward of ``rho`` by ``x + s xi(x)``.

    By the change of variables ``rho_s(x + s xi) J_s = rho`` with
    ``J_s = det(I + s D xi)``, the integral equals ``int f(rho / J_s) J_s dx``.
    """
    jac = field_.jacobian(*grid.mesh)
    d = grid.dim
    mat = np.empty(grid.shape + (d, d))
    for i in range(d):
        for j in range(d):
            mat[..., i, j] = (1.0 if i == j else 0.0) + s * np.broadcast_to(jac[i][j], grid.shape)
    J = np.linalg.det(mat)
    if np.any(J <= 0):
        raise ValueError("perturbation step too large: the map folds")
    return float(integrate(grid, f(rho / J, m) * J))


def fd_gradient_check(grid, rho, field_, m, s=1e-4):
    """Central difference of :func:`pushed_internal_energy` against ``-int rho**m div xi``."""
    rho = check_field(grid, rho, "rho")
    fd = (pushed_internal_energy(grid, rho, field_, m, s)
          - pushed_internal_energy(grid, rho, field_, m, -s)) / (2 * s)
    div = np.broadcast_to(field_.divergence_at(*grid.mesh), grid.shape)
    analytic = -float(integrate(grid, rho ** m * div))
    return FDReport(fd, analytic, s)
