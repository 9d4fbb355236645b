"""Minimizing-movement time stepping for the density/phase pair.

Each step minimizes ``W(rho, rho_prev) / (2 h) + E(rho, chi)`` by alternating
between

* a density solve at fixed phase: entropic transport with the free marginal
  updated by a per-cell KL-proximal map of ``f(s) - chi s``;
* a phase solve at fixed density: an exact dynamic program in 1D, a convex
  relaxation plus level-set thresholding in 2D and 3D.

``W`` is the entropic transport cost ``<C, P> + eps sum P (log P - 1)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .energy import EnergyParams, f, perimeter, total_energy
from .grid import check_field, check_phase, face_jump_counts, integrate
from .transport import (
    DualPotentials,
    EntropicParams,
    TransportError,
    _axis_costs,
    _dense_cost,
    _lse_rows,
    _safe_log,
    gauge,
    log_kernel,
    self_potential,
)

log = logging.getLogger(__name__)


class StepError(RuntimeError):
    """A subsolver failed inside a step."""


class FlowError(RuntimeError):
    """Time loop aborted; ``trajectory`` holds the steps completed so far."""

    def __init__(self, msg, trajectory):
        super().__init__(msg)
        self.trajectory = trajectory


@dataclass(frozen=True)
class StepConfig:
    """Parameters of one minimizing-movement step.

    ``outer_tol=None`` is resolved by :func:`run_flow` to
    ``1e-9 * (1 + E(rho0, chi0))``.

    With ``debias`` the transport term of the density solve is
    ``T(a, b) - T(b, b) - <u, a - b>``, where ``T`` is the entropic cost,
    ``b`` the previous cell masses and ``u`` the symmetric potential of
    ``T(b, b)``.  This is the self-transport correction of a Sinkhorn
    divergence linearized at ``b``: it stays convex in ``a``, vanishes at
    ``a = b`` and removes the entropic smoothing bias to leading order.

    ``envelope`` enables the second phase proposal of :func:`jko_step`.
    """

    h: float
    energy: EnergyParams = field(default_factory=EnergyParams)
    entropic: EntropicParams = field(default_factory=EntropicParams)
    outer_max: int = 50
    outer_tol: float | None = None
    newton_tol: float = 1e-12
    pd_max: int = 200000
    pd_tol: float = 1e-7
    debias: bool = True
    envelope: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValueError(f"h must be > 0, got {self.h}")
        if self.outer_max < 1:
            raise ValueError("outer_max must be >= 1")
        for name in ("outer_tol", "newton_tol", "pd_tol"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if self.pd_max < 1:
            raise ValueError("pd_max must be >= 1")

    def resolved(self, grid, energy0=None):
        out = replace(self, energy=self.energy.resolved(grid))
        if out.outer_tol is None:
            e0 = 0.0 if energy0 is None else energy0
            out = replace(out, outer_tol=1e-9 * (1.0 + abs(e0)))
        return out


@dataclass
class DensitySolution:
    """Output of :func:`solve_density`; arrays carry the batch axes of ``chi``."""

    rho: np.ndarray
    phi: np.ndarray
    transport_cost: np.ndarray   # <C, P>
    entropic_cost: np.ndarray    # transport surrogate, debiased when configured
    objective: np.ndarray        # entropic_cost / 2h + E(rho, chi)
    potentials: DualPotentials
    sweeps: int
    marginal_error: float


@dataclass
class StepResult:
    rho: np.ndarray
    chi: np.ndarray
    phi: np.ndarray
    w2_squared: float
    energy: object
    objective: float
    outer_iters: int
    potentials: DualPotentials
    stats: dict = field(default_factory=dict)

    @property
    def entropic_cost(self):
        return self.stats.get("entropic_cost", float("nan"))


@dataclass
class Trajectory:
    grid: object
    config: StepConfig
    rho0: np.ndarray
    chi0: np.ndarray
    energy0: object
    steps: list = field(default_factory=list)

    @property
    def h(self):
        return self.config.h

    def __len__(self):
        return len(self.steps)

    def rho(self, n):
        return self.rho0 if n == 0 else self.steps[n - 1].rho

    def chi(self, n):
        return self.chi0 if n == 0 else self.steps[n - 1].chi

    def energy(self, n):
        return self.energy0 if n == 0 else self.steps[n - 1].energy

    def index_at(self, t):
        """Step index ``n`` with ``t`` in ``[n h, (n + 1) h)``, clipped to the last step."""
        n = int(math.floor(t / self.h + 1e-9))
        return min(max(n, 0), len(self.steps))

    def rho_at(self, t):
        return self.rho(self.index_at(t))


# ---------------------------------------------------------------------------
# KL-proximal maps


def prox_log_m1(log_q, chi, eps_p):
    """Log of the minimizer of ``s log s - chi s + eps_p (s log(s/q) - s + q)``."""
    return (eps_p * log_q + chi - 1.0) / (1.0 + eps_p)


def prox_log_newton(log_q, chi, eps_p, m, tol=1e-12, max_iter=100, t0=None):
    """Log of the minimizer of ``s**m/(m-1) - chi s + eps_p (s log(s/q) - s + q)``.

    Works in ``t = log s``; the optimality condition
    ``m/(m-1) exp((m-1) t) - chi + eps_p (t - log q) = 0`` is increasing in
    ``t``.  Newton steps that leave the current bracket are replaced by
    bisection.

    Raises
    ------
    StepError
        If some cell has not converged after ``max_iter`` iterations.
    """
    log_q, chi = np.broadcast_arrays(np.asarray(log_q, float), np.asarray(chi, float))
    c = m / (m - 1.0)

    def g(t):
        return c * np.exp((m - 1.0) * t) - chi + eps_p * (t - log_q)

    # g(lo) < 0: the power term is at most (chi+ + eps_p)/2 and the entropy term at most -eps_p
    lo = np.minimum(log_q - 1.0 + np.minimum(chi, 0.0) / eps_p,
                    np.log((np.maximum(chi, 0.0) + eps_p) / (2.0 * c)) / (m - 1.0))
    # g(hi) >= 0: the power term is at least chi+ and the entropy term nonnegative
    with np.errstate(divide="ignore"):
        hi = np.maximum(log_q, np.log(np.maximum(chi, 0.0) / c) / (m - 1.0))
    t = np.clip(log_q if t0 is None else np.asarray(t0, float), lo, hi)
    done = np.zeros(t.shape, bool)
    for _ in range(max_iter):
        gt = g(t)
        lo = np.where(gt < 0, t, lo)
        hi = np.where(gt > 0, t, hi)
        dg = c * (m - 1.0) * np.exp((m - 1.0) * t) + eps_p
        tn = t - gt / dg
        bad = ~((tn > lo) & (tn < hi))
        tn = np.where(bad, 0.5 * (lo + hi), tn)
        done = np.abs(tn - t) <= tol * (1.0 + np.abs(t))
        t = tn
        if np.all(done):
            return t
    idx = np.flatnonzero(~done.ravel())
    raise StepError(f"prox Newton did not converge at cell {int(idx[0])}")


def prox_log(log_q, chi, eps_p, m, tol=1e-12, t0=None):
    if m == 1:
        return prox_log_m1(log_q, chi, eps_p)
    return prox_log_newton(log_q, chi, eps_p, m, tol=tol, t0=t0)


MASS_MATCH_TOL = 1e-13


def mass_matched_prox(log_q, chi, eps_p, m, dv, log_mass, axes, tol=1e-12, t0=None):
    """Proximal map after the dual translation that gives it the target mass.

    Shifting the dual pair to ``(F - c, G + c)`` leaves the plan unchanged and
    multiplies the kernel image ``q`` by ``exp(c / eps)``.  The shift that
    maximizes the dual along this direction is the one whose proximal image
    has total mass ``exp(log_mass)``; without it, mass is corrected only at a
    rate ``eps_p`` per sweep, which stalls for large time steps.

    Returns ``(shift, t)`` with ``shift = c / eps`` (keepdims over ``axes``)
    and ``t`` the log-density of the proximal image at that shift.
    """
    def log_mass_of(t):
        mx = np.max(t, axis=axes, keepdims=True)
        return np.log(np.sum(np.exp(t - mx), axis=axes, keepdims=True)) + mx + math.log(dv)

    if m == 1:
        # prox is affine in log q with slope k
        k = eps_p / (1.0 + eps_p)
        t = prox_log_m1(log_q, chi, eps_p)
        gap = log_mass - log_mass_of(t)
        # a mismatch at rounding level divided by a tiny k would only add noise
        shift = np.where(np.abs(gap) > MASS_MATCH_TOL, gap / k, 0.0)
        return shift, t + k * shift
    c = m / (m - 1.0)
    shift = np.zeros(np.max(log_q, axis=axes, keepdims=True).shape)
    lo = np.full(shift.shape, -np.inf)    # shifts known to give too little mass
    hi = np.full(shift.shape, np.inf)     # shifts known to give too much
    cap = np.ones(shift.shape)
    t = t0
    # safeguarded Newton: log-mass is increasing in the shift but not concave
    for _ in range(200):
        t = prox_log_newton(log_q + shift, chi, eps_p, m, tol=tol, t0=t)
        lm = log_mass_of(t)
        gap = log_mass - lm
        if np.all(np.abs(gap) <= MASS_MATCH_TOL):
            break
        lo = np.where(gap > 0, shift, lo)
        hi = np.where(gap < 0, shift, hi)
        w = np.exp(t - lm) * dv
        slope = np.sum(w * eps_p / (c * (m - 1.0) * np.exp((m - 1.0) * t) + eps_p),
                       axis=axes, keepdims=True)
        nxt = shift + gap / slope
        nxt = np.clip(nxt, shift - cap, shift + cap)
        cap = 2.0 * cap
        inside = (nxt > lo) & (nxt < hi)
        mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi), nxt)
        nxt = np.where(inside, nxt, mid)
        shift = np.where(np.abs(gap) > MASS_MATCH_TOL, nxt, shift)
    else:
        t = prox_log_newton(log_q + shift, chi, eps_p, m, tol=tol, t0=t)
    return shift, t


# ---------------------------------------------------------------------------
# density subproblem


def _weighted_log_kernel(grid, hfield, eps, costs, axis):
    """Like ``log_kernel`` with an extra factor ``(x_axis - y_axis)**2`` in the sum."""
    out = np.asarray(hfield, dtype=float)
    off = out.ndim - grid.dim
    for k, ck in enumerate(costs):
        moved = np.moveaxis(out, off + k, -1)
        mat = -ck / eps
        if k == axis:
            with np.errstate(divide="ignore"):
                mat = mat + np.log(ck)
        t = moved[..., None, :] + mat
        mx = np.max(t, axis=-1, keepdims=True)
        mx = np.where(np.isfinite(mx), mx, 0.0)
        with np.errstate(divide="ignore"):
            red = np.log(np.sum(np.exp(t - mx), axis=-1)) + mx[..., 0]
        out = np.moveaxis(red, -1, off + k)
    return out


def _plan_cost(grid, fpot, gpot, eps, costs):
    """``<C, P>`` for ``P = exp((F + G - C) / eps)``, per batch entry."""
    axes = tuple(range(-grid.dim, 0))
    total = 0.0
    for k in range(grid.dim):
        lk = _weighted_log_kernel(grid, gpot / eps, eps, costs, k)
        total = total + np.sum(np.exp(fpot / eps + lk), axis=axes)
    return total


def solve_density(grid, rho_prev, chi, cfg, init=None, h=None):
    """Minimize the entropic step objective over unit-mass densities at fixed phase.

    Parameters
    ----------
    rho_prev : ndarray
        Previous density, unit mass.
    chi : ndarray
        Phase field; leading axes are treated as a batch of independent
        problems sharing ``rho_prev``.
    cfg : StepConfig
    init : DualPotentials, optional
        Warm start.  The eps schedule then starts at ``eps_min``.
    h : float, optional
        Step size override (used by the De Giorgi interpolation).

    Returns
    -------
    DensitySolution
    """
    h = cfg.h if h is None else h
    prm = cfg.entropic
    p = cfg.energy.resolved(grid)
    rho_prev = check_field(grid, rho_prev, "rho_prev")
    chi = check_phase(grid, chi, batch=True).astype(float)
    mass = integrate(grid, rho_prev)
    if abs(mass - 1.0) > 1e-10:
        raise ValueError(f"rho_prev has mass {mass!r}, expected 1")
    dv = grid.cell_volume
    costs = _axis_costs(grid)
    b = rho_prev * dv
    lb = _safe_log(b)
    live = np.isfinite(lb)
    bshape = chi.shape[: chi.ndim - grid.dim]
    axes = tuple(range(-grid.dim, 0))

    sched = prm.schedule(grid)
    if init is not None:
        sched = sched[-1:]
        fpot = np.broadcast_to(np.nan_to_num(init.u, neginf=0.0), chi.shape).copy()
    else:
        fpot = np.zeros(chi.shape)
    gpot = np.where(live, 0.0, -np.inf)
    if init is not None:
        gpot = np.where(live, np.nan_to_num(init.v, neginf=0.0), -np.inf)
    gpot = np.broadcast_to(gpot, chi.shape).copy()

    tlog = None
    sweeps = 0
    err = np.inf
    dense = grid.size <= DENSE_MAX_CELLS
    cmat = _dense_cost(grid) if dense else None
    tilt = None
    if cfg.debias:
        tilt = self_potential(grid, b, sched[-1], prm.tol_marginal, prm.max_sweeps,
                              cmat=cmat, costs=costs)
    for level, eps in enumerate(sched):
        eps_p = eps / (2.0 * h)
        last = level == len(sched) - 1
        tol = prm.tol_marginal if last else max(prm.tol_marginal, 1e-3)
        lin = chi if tilt is None or not last else chi + tilt / (2.0 * h)
        args = (grid, b, lb, live, lin, p.m, eps, eps_p, dv, tol, prm.max_sweeps - sweeps,
                cfg.newton_tol)
        if dense:
            fpot, gpot, tlog, used, err = _iterate_dense(cmat, fpot, gpot, tlog, *args)
        else:
            fpot, gpot, tlog, used, err = _iterate_log(costs, fpot, gpot, tlog, *args)
        sweeps += used
        if err > tol:
            raise TransportError(f"density solve stalled with marginal error {err:.3e}", err)

    eps = sched[-1]
    la = fpot / eps + log_kernel(grid, gpot / eps, eps, costs)
    a = np.exp(la)
    rho = a / dv
    transport = _plan_cost(grid, fpot, gpot, eps, costs)
    fa = np.sum(fpot * a, axis=axes)
    gb = np.sum(np.where(live, gpot, 0.0) * b, axis=axes)
    entropic = fa + gb - eps * np.sum(a, axis=axes)
    internal = integrate(grid, f(rho, p.m))
    coupling = integrate(grid, chi * (p.lam - rho))
    per = p.sigma * _perimeter_batch(grid, chi)
    if tilt is not None:
        self_cost = 2.0 * np.sum(np.where(live, tilt, 0.0) * b) - eps * float(np.sum(b))
        entropic = entropic - self_cost - np.sum(tilt * (a - b), axis=axes)
    objective = entropic / (2.0 * h) + per + internal + coupling + p.c_omega
    phi = (fpot if tilt is None else fpot - tilt) / (2.0 * h)
    if not bshape:
        phi = gauge(grid, phi, rho)
    return DensitySolution(
        rho=rho, phi=phi,
        transport_cost=np.asarray(transport), entropic_cost=np.asarray(entropic),
        objective=np.asarray(objective),
        potentials=DualPotentials(fpot, gpot, eps, tilt),
        sweeps=sweeps, marginal_error=err,
    )


DENSE_MAX_CELLS = 4096
ABSORB_AT = 30.0
TINY = 1e-200


def _iterate_log(costs, fpot, gpot, tlog, grid, b, lb, live, chi, m, eps, eps_p, dv, tol,
                 budget, newton_tol):
    """Scaling sweeps at one eps level, fully in the log domain."""
    axes = tuple(range(-grid.dim, 0))
    log_mass = math.log(float(np.sum(b)))
    used = 0
    while True:
        lk = log_kernel(grid, fpot / eps, eps, costs)
        with np.errstate(invalid="ignore"):
            img = np.where(live, np.exp(gpot / eps + lk), 0.0)
        err = float(np.max(np.sum(np.abs(img - b), axis=axes)))
        if not np.isfinite(err):
            raise TransportError("non-finite marginal in density solve; increase eps0", err)
        gpot = np.where(live, eps * (lb - lk), -np.inf)
        if (err <= tol and used > 0) or used >= budget:
            return fpot, gpot, tlog, used, err
        used += 1
        lq = log_kernel(grid, gpot / eps, eps, costs)
        shift, tlog = mass_matched_prox(lq - math.log(dv), chi, eps_p, m, dv, log_mass, axes,
                                        tol=newton_tol, t0=tlog)
        fpot = eps * (tlog + math.log(dv) - lq - shift)


def _iterate_dense(cmat, fpot, gpot, tlog, grid, b, lb, live, chi, m, eps, eps_p, dv, tol,
                   budget, newton_tol):
    """Same sweeps as :func:`_iterate_log` with an absorbed dense kernel.

    The kernel ``exp((F_i + G_j - C_ij) / eps)`` is rebuilt from the log-domain
    potentials whenever the multiplicative scalings leave ``exp(+-ABSORB_AT)``,
    so no entry that matters can under- or overflow.
    """
    n = grid.size
    bs = chi.shape[: chi.ndim - grid.dim]
    F = fpot.reshape(bs + (n,))
    G = gpot.reshape(bs + (n,))
    bf, lbf, livef = b.ravel(), lb.ravel(), live.ravel()
    chif = chi.reshape(bs + (n,))
    tl = None if tlog is None else tlog.reshape(bs + (n,))
    ldv = math.log(dv)
    log_mass = math.log(float(np.sum(b)))

    def kernel(F, G):
        with np.errstate(under="ignore"):
            return np.exp((F[..., :, None] + G[..., None, :] - cmat) / eps)

    def g_update(F):
        return np.where(livef, eps * (lbf - _lse_rows(F[..., None, :] / eps - cmat.T / eps)), -np.inf)

    ones = np.where(livef, 1.0, 0.0)
    G = g_update(F)
    K = kernel(F, G)
    lalpha = np.zeros_like(F)     # log scalings relative to F, G
    beta = ones * np.ones_like(G)
    used = 0
    while True:
        col = np.einsum("...ij,...i->...j", K, np.exp(lalpha))
        err = float(np.max(np.sum(np.abs(beta * col - bf), axis=-1)))
        if not np.isfinite(err):
            raise TransportError("non-finite marginal in density solve; increase eps0", err)
        with np.errstate(divide="ignore"):
            beta = np.where(livef, bf / np.where(col > 0, col, 1.0), 0.0)
        if (np.any(livef & (col < TINY))
                or np.max(np.abs(np.log(beta[..., livef]))) > ABSORB_AT):
            F = F + eps * lalpha
            lalpha = np.zeros_like(F)
            G = g_update(F)
            beta = ones * np.ones_like(G)
            K = kernel(F, G)
        if (err <= tol and used > 0) or used >= budget:
            break
        used += 1
        row = np.einsum("...ij,...j->...i", K, beta)
        if np.any(row < TINY):
            G = G + np.where(livef, eps * np.log(np.where(livef, beta, 1.0)), 0.0)
            beta = ones * np.ones_like(G)
            lrow = _lse_rows(G[..., None, :] / eps - cmat / eps) + F / eps
            rebuild = True
        else:
            lrow = np.log(row)
            rebuild = False
        lq = lrow - F / eps
        shift, tl = mass_matched_prox(lq - ldv, chif, eps_p, m, dv, log_mass, (-1,),
                                      tol=newton_tol, t0=tl)
        lalpha = tl + ldv - lrow - shift
        if rebuild or np.max(np.abs(lalpha)) > ABSORB_AT:
            G = G + np.where(livef, eps * np.log(np.where(livef, beta, 1.0)), 0.0)
            F = F + eps * lalpha
            lalpha = np.zeros_like(F)
            beta = ones * np.ones_like(G)
            K = kernel(F, G)
    G = G + np.where(livef, eps * np.log(np.where(livef, beta, 1.0)), 0.0)
    F = F + eps * lalpha
    shape = chi.shape
    return (F.reshape(shape), G.reshape(shape), None if tl is None else tl.reshape(shape),
            used, err)


def _perimeter_batch(grid, chi):
    counts = face_jump_counts(grid, chi)
    return sum(c * grid.face_area(k) for k, c in enumerate(counts))


# ---------------------------------------------------------------------------
# phase subproblem


def phase_energy(grid, rho, chi, params):
    """``sigma P(chi) + int chi (lam - rho)``, the phase-dependent part of the energy."""
    p = params
    return p.sigma * _perimeter_batch(grid, chi) + integrate(grid, chi * (p.lam - np.asarray(rho)))


def _phase_dp_1d(c, jump):
    """Exact minimizer of ``jump * #changes + sum c_i chi_i`` over binary ``chi``."""
    n = c.size
    v0, v1 = 0.0, c[0]
    back = np.zeros((n, 2), dtype=np.int8)
    for i in range(1, n):
        # arrival in state 0 from 0 (no jump) or from 1 (jump); ties prefer 0
        a0, a1 = v0, v1 + jump
        back[i, 0] = 0 if a0 <= a1 else 1
        n0 = min(a0, a1)
        b0, b1 = v0 + jump, v1
        back[i, 1] = 0 if b0 <= b1 else 1
        n1 = min(b0, b1) + c[i]
        v0, v1 = n0, n1
    state = 0 if v0 <= v1 else 1
    best = min(v0, v1)
    chi = np.zeros(n, dtype=np.int8)
    for i in range(n - 1, -1, -1):
        chi[i] = state
        state = back[i, state]
    return chi, best


def _phase_pd(grid, c, sigma, pd_tol, pd_max, u0=None):
    """Primal-dual iterations for ``min_{0<=u<=1} sigma TV(u) + <c, u>``.

    TV is the anisotropic face sum with face areas as weights.  Diagonal
    preconditioning is used.  Returns ``(u, gap, iterations)``.
    """
    d = grid.dim
    w = [sigma * grid.face_area(k) for k in range(d)]
    # scale so that face weights are O(1)
    scale = max(max(w), 1e-300)
    w = [wk / scale for wk in w]
    cs = c / scale
    u = np.full(grid.shape, 0.5) if u0 is None else np.asarray(u0, float).copy()
    ubar = u.copy()
    p = [np.zeros(tuple(n - 1 if j == k else n for j, n in enumerate(grid.shape))) for k in range(d)]
    # row sums of |K| are 2 per face, column sums count adjacent faces per cell
    deg = np.zeros(grid.shape)
    for k in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        deg[tuple(lo)] += 1
        deg[tuple(hi)] += 1
    tau = 1.0 / np.maximum(deg, 1)
    sig = 0.5

    def kt(pp):
        out = np.zeros(grid.shape)
        for k in range(d):
            lo = [slice(None)] * d
            hi = [slice(None)] * d
            lo[k] = slice(0, -1)
            hi[k] = slice(1, None)
            out[tuple(lo)] -= pp[k]
            out[tuple(hi)] += pp[k]
        return out

    def primal(uu):
        return float(np.sum(cs * uu) + sum(wk * np.sum(np.abs(np.diff(uu, axis=k))) for k, wk in enumerate(w)))

    gap = np.inf
    it = 0
    for it in range(1, pd_max + 1):
        for k in range(d):
            p[k] = np.clip(p[k] + sig * np.diff(ubar, axis=k), -w[k], w[k])
        g = kt(p) + cs
        un = np.clip(u - tau * g, 0.0, 1.0)
        ubar = 2 * un - u
        u = un
        if it % 20 == 0 or it == pd_max:
            dual = float(np.sum(np.minimum(kt(p) + cs, 0.0)))
            gap = (primal(u) - dual) * scale
            if gap <= pd_tol:
                break
    return u, gap, it


def threshold_scan(grid, u, costs, sigma):
    """Best level set ``{u > s}`` over ``s = 1/2`` and all midpoints of distinct values of ``u``.

    The objective is ``sigma P(chi) + sum costs * chi``.  By the coarea
    formula the relaxed objective is the average of the level-set
    objectives, so the best one is never worse.  Level 1/2 wins ties.
    """
    vals = np.unique(u)
    levels = np.concatenate(([0.5], 0.5 * (vals[1:] + vals[:-1])))
    chis = (u[None] > levels.reshape((-1,) + (1,) * grid.dim)).astype(np.int8)
    en = sigma * _perimeter_batch(grid, chis) + np.sum(chis * costs, axis=tuple(range(1, grid.dim + 1)))
    k = int(np.argmin(en))
    if en[0] <= en[k]:
        k = 0
    return chis[k], float(en[k])


def solve_phase(grid, rho, cfg, stats=None, u0=None):
    """Minimize ``sigma P(chi) + int chi (lam - rho)`` over binary ``chi``.

    1D: exact dynamic program, ties toward the empty phase.
    Higher dimensions: relaxed problem by primal-dual iterations, then
    :func:`threshold_scan`.

    Raises
    ------
    StepError
        If the primal-dual gap is above ``pd_tol`` after ``pd_max`` iterations.
    """
    p = cfg.energy.resolved(grid)
    rho = check_field(grid, rho, "rho")
    return solve_phase_costs(grid, (p.lam - rho) * grid.cell_volume, cfg, stats, u0)


def solve_phase_costs(grid, costs, cfg, stats=None, u0=None):
    """Minimize ``sigma P(chi) + sum costs * chi`` over binary ``chi``; see :func:`solve_phase`."""
    sigma = cfg.energy.sigma
    c = np.asarray(costs, dtype=float)
    if grid.dim == 1:
        jump = sigma * grid.face_area(0)
        chi, best = _phase_dp_1d(c, jump)
        scale = jump + float(np.sum(np.abs(c)))
        if best >= -1e-12 * scale:
            chi = np.zeros_like(chi)
        if stats is not None:
            stats.setdefault("phase_value", []).append(float(min(best, 0.0)))
        return chi
    u, gap, it = _phase_pd(grid, c, sigma, cfg.pd_tol, cfg.pd_max, u0=u0)
    if gap > cfg.pd_tol:
        raise StepError(f"primal-dual phase solve did not converge, gap {gap:.3e}")
    relaxed = float(np.sum(c * u) + sigma * sum(
        grid.face_area(k) * np.sum(np.abs(np.diff(u, axis=k))) for k in range(grid.dim)))
    chi, en = threshold_scan(grid, u, c, sigma)
    if stats is not None:
        stats.setdefault("pd_iters", []).append(it)
        stats.setdefault("pd_gap", []).append(gap)
        stats.setdefault("relaxed_energy", []).append(relaxed)
        stats.setdefault("threshold_energy", []).append(en)
    return chi


def f_conjugate(y, m):
    """Convex conjugate of the free-energy density (restricted to ``s >= 0``)."""
    y = np.asarray(y, dtype=float)
    if m == 1:
        return np.exp(y - 1.0)
    return ((m - 1.0) * np.maximum(y, 0.0) / m) ** (m / (m - 1.0))


ENVELOPE_SHIFTS = tuple(np.linspace(-1.25, 0.25, 16))


def envelope_costs(grid, rho, chi, params, shift=0.0):
    """Phase costs that let the density follow the phase at a frozen local potential.

    With ``psi = f'(rho) - chi`` held fixed, the best density in a cell of
    phase ``k`` has free energy ``-f*(psi + k)``, so switching the cell on
    costs ``lam - f*(psi + 1) + f*(psi)`` per unit volume instead of
    ``lam - rho``.  ``shift`` moves ``psi`` by a constant, standing in for
    the change of the mass multiplier that a large phase change causes.
    """
    p = params
    rho = np.asarray(rho, dtype=float)
    if p.m == 1:
        psi = np.log(np.maximum(rho, np.finfo(float).tiny)) + 1.0 - chi
    else:
        psi = p.m / (p.m - 1.0) * rho ** (p.m - 1.0) - chi
    psi = psi + shift
    gain = f_conjugate(psi + 1.0, p.m) - f_conjugate(psi, p.m)
    return (p.lam - gain) * grid.cell_volume


def envelope_candidates(grid, rho, chi, cfg, shifts=ENVELOPE_SHIFTS):
    """Phase proposals from :func:`envelope_costs` over a range of shifts."""
    return [solve_phase_costs(grid, envelope_costs(grid, rho, chi, cfg.energy, mu), cfg)
            for mu in shifts]


def boundary_moves(grid, chi, reach=3):
    """Local edits of the phase.

    1D: every end of every phase interval moved by up to ``reach`` cells,
    plus every run of at most ``reach`` cells set to 0 or to 1.
    Otherwise: single-cell flips next to the interface.
    """
    chi = np.asarray(chi, np.int8)
    out = []
    if grid.dim == 1:
        n = chi.size
        for length in range(1, reach + 1):
            for i in range(n - length + 1):
                for v in (0, 1):
                    if np.any(chi[i:i + length] != v):
                        c = chi.copy()
                        c[i:i + length] = v
                        out.append(c)
        d = np.diff(np.concatenate(([0], chi, [0])))
        for s0, e0 in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)):
            for end in (s0, e0):
                for k in range(-reach, reach + 1):
                    j = end + k
                    if k == 0 or not 0 <= j <= n:
                        continue
                    c = chi.copy()
                    lo, hi = min(end, j), max(end, j)
                    # moving an end outward grows the interval, inward shrinks it
                    grow = (end == s0) == (k < 0)
                    c[lo:hi] = 1 if grow else 0
                    out.append(c)
        return out
    edge = np.zeros(grid.shape, bool)
    for k in range(grid.dim):
        diff = np.diff(chi, axis=k) != 0
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[k] = slice(0, -1)
        hi[k] = slice(1, None)
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    for idx in zip(*np.nonzero(edge)):
        c = chi.copy()
        c[idx] = 1 - c[idx]
        out.append(c)
    return out


def linearized_value(grid, phi, chis, params):
    """``min_rho <phi, rho> + E(rho, chi)`` over unit-mass densities, for a batch of phases.

    The transport part of the step objective is convex in the density and
    ``phi`` is its gradient at the current density, so for any phase the
    change of this value never overstates the change of the true step
    objective.  Used to screen phase proposals.
    """
    p = params
    dv = grid.cell_volume
    y = np.asarray(chis, float) - np.asarray(phi, float)
    axes = tuple(range(1, y.ndim))
    if p.m == 1:
        top = np.max(y, axis=axes, keepdims=True)
        lse = np.log(np.sum(dv * np.exp(y - 1.0 - top), axis=axes)) + top.reshape(-1)
        value = -lse - 1.0
    else:
        # the mass multiplier c solves sum dv (f*)'(y + c) = 1; bisection on c
        k = 1.0 / (p.m - 1.0)
        r = p.m / (p.m - 1.0)

        def mass(c):
            return np.sum(dv * ((p.m - 1.0) * np.maximum(y + c, 0.0) / p.m) ** k, axis=axes)

        hi = -np.min(y, axis=axes) + r * (1.0 / grid.volume) ** (p.m - 1.0)
        lo = -np.max(y, axis=axes)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            big = mass(mid.reshape((-1,) + (1,) * grid.dim)) > 1.0
            hi = np.where(big, mid, hi)
            lo = np.where(big, lo, mid)
        c = (0.5 * (lo + hi)).reshape((-1,) + (1,) * grid.dim)
        value = c.reshape(-1) - np.sum(dv * f_conjugate(y + c, p.m), axis=axes)
    return value + p.lam * np.sum(chis, axis=axes) * dv + p.sigma * _perimeter_batch(grid, chis)


def phase_proposals(grid, sol, chi, cfg, limit=32):
    """Distinct proposals whose linearized value beats the current phase, best first."""
    p = cfg.energy
    seen = {np.asarray(chi, np.int8).tobytes()}
    cands = []
    for c in envelope_candidates(grid, sol.rho, chi, cfg) + boundary_moves(grid, chi):
        key = c.tobytes()
        if key not in seen:
            seen.add(key)
            cands.append(c)
    if not cands:
        return []
    stack = np.stack([np.asarray(chi, np.int8)] + cands)
    vals = linearized_value(grid, sol.phi, stack, p)
    gain = vals[1:] - vals[0]
    tol = 1e-12 * (1.0 + abs(vals[0]))
    order = [int(i) for i in np.argsort(gain, kind="stable") if gain[i] < -tol]
    return [cands[i] for i in order[:limit]]


def _pick(grid, sol, k):
    """Entry ``k`` of a batched :class:`DensitySolution`, with the potential gauged."""
    pots = sol.potentials
    return DensitySolution(
        rho=sol.rho[k], phi=gauge(grid, sol.phi[k], sol.rho[k]),
        transport_cost=sol.transport_cost[k], entropic_cost=sol.entropic_cost[k],
        objective=sol.objective[k],
        potentials=DualPotentials(pots.u[k], pots.v[k], pots.eps, pots.u_self),
        sweeps=sol.sweeps, marginal_error=sol.marginal_error,
    )


# ---------------------------------------------------------------------------
# steps and the time loop


def jko_step(grid, rho_prev, chi_prev, cfg, init=None, h=None):
    """One minimizing-movement step by alternating density and phase solves.

    The phase solve at frozen density can stall where flipping cells only
    pays off once the density adapts.  When it stalls and ``cfg.envelope``
    is set, the proposals of :func:`phase_proposals` are scored by one
    batched density solve and the best is kept if it strictly lowers the
    objective.

    Returns
    -------
    StepResult
        ``w2_squared`` is the transport cost ``<C, P>`` of the entropic plan.
    """
    h = cfg.h if h is None else h
    cfg = cfg.resolved(grid) if cfg.outer_tol is None else replace(cfg, energy=cfg.energy.resolved(grid))
    p = cfg.energy
    chi = check_phase(grid, chi_prev)
    stats = {"sweeps": [], "objective": [], "outer_max_reached": False, "envelope_moves": 0}

    def density(c):
        s = solve_density(grid, rho_prev, c, cfg, init=init, h=h)
        stats["sweeps"].append(s.sweeps)
        stats["objective"].append(float(s.objective))
        return s

    sol = density(chi)
    obj = float(sol.objective)
    for k in range(1, cfg.outer_max + 1):
        new = solve_phase(grid, sol.rho, cfg, stats=stats)
        e_old = float(phase_energy(grid, sol.rho, chi, p))
        e_new = float(phase_energy(grid, sol.rho, new, p))
        if e_new < e_old and not np.array_equal(new, chi):
            obj_after = obj + (e_new - e_old)
            stats["objective"].append(obj_after)
            chi = new
            if obj - obj_after < cfg.outer_tol:
                obj = obj_after
                break
            trial = density(chi)
        elif cfg.envelope:
            cands = phase_proposals(grid, sol, chi, cfg)
            if not cands:
                break
            batch = solve_density(grid, rho_prev, np.stack(cands), cfg, init=init, h=h)
            stats["sweeps"].append(batch.sweeps)
            j = int(np.argmin(batch.objective))
            if not float(batch.objective[j]) < obj - cfg.outer_tol:
                break
            stats["envelope_moves"] += 1
            trial = _pick(grid, batch, j)
            stats["objective"].append(float(trial.objective))
            chi = cands[j]
            obj_after = obj
        else:
            break
        # alternation can only lower the objective, up to solver accuracy
        if float(trial.objective) > obj_after + 1e-8 * (1.0 + abs(obj_after)):
            raise StepError(f"objective increased in outer iteration {k}: "
                            f"{obj_after!r} -> {float(trial.objective)!r}")
        sol, obj = trial, float(trial.objective)
    else:
        stats["outer_max_reached"] = True
        log.warning("outer iteration limit %d reached", cfg.outer_max)
    rho = sol.rho
    energy = total_energy(grid, rho, chi, p)
    stats["entropic_cost"] = float(sol.entropic_cost)
    stats["marginal_error"] = sol.marginal_error
    return StepResult(
        rho=rho, chi=chi, phi=sol.phi, w2_squared=float(sol.transport_cost),
        energy=energy, objective=obj,
        outer_iters=k, potentials=sol.potentials, stats=stats,
    )


def degiorgi_interpolate(grid, rho_prev, chi_prev, t, cfg, init=None):
    """Minimizer of ``W(rho, rho_prev) / (2 t) + E(rho, chi)`` for ``0 < t <= h``."""
    if not 0 < t <= cfg.h * (1 + 1e-12):
        raise ValueError(f"t must lie in (0, h], got {t}")
    return jko_step(grid, rho_prev, chi_prev, cfg, init=init, h=t)


def n_steps_for(T, h):
    """Number of steps covering ``[0, T]``; zero when ``T < h``."""
    return int(math.floor(T / h + 1e-9))


def run_flow(grid, rho0, chi0, T, cfg, callback=None):
    """Run the discrete flow up to time ``T``.

    Raises
    ------
    FlowError
        Carrying the partial trajectory when a step fails.
    """
    rho0 = check_field(grid, rho0, "rho0")
    chi0 = check_phase(grid, chi0)
    if np.any(rho0 < 0):
        raise ValueError("rho0 must be nonnegative")
    e0 = total_energy(grid, rho0, chi0, cfg.energy.resolved(grid))
    cfg = cfg.resolved(grid, e0.total)
    traj = Trajectory(grid, cfg, rho0, chi0, e0)
    rho, chi, init = rho0, chi0, None
    for n in range(1, n_steps_for(T, cfg.h) + 1):
        try:
            step = jko_step(grid, rho, chi, cfg, init=init)
        except (StepError, TransportError, FloatingPointError) as exc:
            raise FlowError(f"step {n} failed: {exc}", traj) from exc
        traj.steps.append(step)
        rho, chi, init = step.rho, step.chi, step.potentials
        if callback is not None:
            callback(n, step)
    return traj
