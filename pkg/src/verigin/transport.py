"""Quadratic-cost optimal transport between grid densities.

Two solvers live here: an exact one for 1D piecewise-constant densities
(quantile functions) and an entropic log-domain scaling solver for any
dimension.  The cost between cell centers is ``|x - y|**2`` and it is
separable across axes, so every kernel application is done axis by axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import check_field, integrate

SUPPORT_REL = 1e-10


class TransportError(RuntimeError):
    """Scaling iterations failed; ``marginal_error`` holds the last residual."""

    def __init__(self, msg, marginal_error=float("nan")):
        super().__init__(msg)
        self.marginal_error = marginal_error


@dataclass(frozen=True)
class EntropicParams:
    """Regularization schedule and stopping rule for the scaling solver.

    ``None`` for ``eps0`` or ``eps_min`` means "derive from the grid":
    ``eps0 = L**2 / 16`` with ``L`` the largest box side and
    ``eps_min = 4 * dx**2`` with ``dx`` the largest spacing.
    """

    eps0: float | None = None
    eps_min: float | None = None
    decay: float = 0.7
    max_sweeps: int = 20000
    tol_marginal: float = 1e-9
    relax: float = 1.8

    def __post_init__(self):
        if not 0 < self.decay < 1:
            raise ValueError(f"decay must lie in (0, 1), got {self.decay}")
        for name in ("eps0", "eps_min"):
            v = getattr(self, name)
            if v is not None and not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be > 0, got {v}")
        if self.eps0 is not None and self.eps_min is not None and self.eps_min > self.eps0:
            raise ValueError("eps_min must not exceed eps0")
        if self.max_sweeps < 1 or not self.tol_marginal > 0:
            raise ValueError("max_sweeps must be >= 1 and tol_marginal > 0")
        if not 1.0 <= self.relax < 2.0:
            raise ValueError(f"relax must lie in [1, 2), got {self.relax}")

    def schedule(self, grid):
        """Decreasing list of regularization levels ending at ``eps_min``."""
        eps_min = self.resolved_eps_min(grid)
        eps0 = self.eps0
        if eps0 is None:
            eps0 = max(b - a for a, b in grid.extents) ** 2 / 16
        eps0 = max(eps0, eps_min)
        out = [eps0]
        while out[-1] > eps_min:
            out.append(max(eps_min, out[-1] * self.decay))
        return out

    def resolved_eps_min(self, grid):
        if self.eps_min is not None:
            return float(self.eps_min)
        return 4.0 * max(grid.spacing) ** 2


@dataclass(frozen=True)
class DualPotentials:
    """Dual pair of the entropic problem.

    ``u`` lives on the first (current) density, ``v`` on the second
    (previous) one.  Both are in cost units, i.e. already multiplied by
    ``eps``.  Entries are ``-inf`` on cells without mass.  ``u_self`` is the
    symmetric self-transport potential used for debiasing, if any.
    """

    u: np.ndarray
    v: np.ndarray
    eps: float
    u_self: np.ndarray | None = None


@dataclass(frozen=True)
class TransportResult:
    w2_squared: float
    potentials: DualPotentials
    marginal_error: float
    sweeps: int = 0
    debiased: bool = False


# ---------------------------------------------------------------------------
# log-domain kernel


def _axis_costs(grid):
    return [(c[:, None] - c[None, :]) ** 2 for c in grid.centers]


def _lse_last(t):
    """logsumexp over the last axis, -inf safe."""
    m = np.max(t, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (np.log(np.sum(np.exp(t - m), axis=-1)) + m[..., 0])


def log_kernel(grid, hfield, eps, costs=None):
    """Evaluate ``x -> log sum_y exp(hfield(y) - |x - y|**2 / eps)``.

    ``hfield`` may carry leading batch axes; the sum runs over the trailing
    grid axes and is carried out one axis at a time.
    """
    costs = _axis_costs(grid) if costs is None else costs
    out = np.asarray(hfield, dtype=float)
    off = out.ndim - grid.dim
    for k, ck in enumerate(costs):
        moved = np.moveaxis(out, off + k, -1)
        red = _lse_last(moved[..., None, :] - ck / eps)
        out = np.moveaxis(red, -1, off + k)
    return out


def _safe_log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def _lse_rows(t):
    mx = np.max(t, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(t - mx), axis=-1)) + mx[..., 0]


def _dense_cost(grid):
    pts = np.stack([m.ravel() for m in grid.mesh], axis=1)
    return np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)


def self_potential(grid, b, eps, tol, max_sweeps, cmat=None, costs=None):
    """Symmetric potential ``u`` with ``exp((u_i + u_j - C_ij) / eps)`` having marginals ``b``.

    Uses the averaged fixed-point map, which converges quickly.  Cells with
    ``b = 0`` get the value of the map itself at the smallest positive mass,
    a finite extension that only matters for cells without previous mass.
    """
    lb = _safe_log(b)
    live = np.isfinite(lb)
    floor = float(np.min(lb[live]))

    if cmat is not None:
        flat = cmat / eps

        def lse(u):
            return _lse_rows(u.ravel()[None, :] / eps - flat).reshape(grid.shape)
    else:
        def lse(u):
            return log_kernel(grid, u / eps, eps, costs)

    u = np.where(live, 0.5 * eps * lb, -np.inf)
    for _ in range(max_sweeps):
        un = np.where(live, eps * (lb - lse(u)), -np.inf)
        step = float(np.max(np.abs(un[live] - u[live])))
        u = np.where(live, 0.5 * (u + un), -np.inf)
        if step <= tol * eps:
            break
    else:
        raise TransportError("symmetric scaling iterations stalled", step / eps)
    if not np.all(live):
        u = np.where(live, u, eps * (floor - lse(u)))
    return u


# ---------------------------------------------------------------------------
# exact 1D solver


def _masses_1d(grid, rho, name):
    if grid.dim != 1:
        raise ValueError("exact transport is only available in 1D")
    rho = check_field(grid, rho, name)
    if np.any(rho < 0):
        raise ValueError(f"{name} must be nonnegative")
    w = rho * grid.spacing[0]
    return rho, w, np.concatenate(([0.0], np.cumsum(w)))


def _quantile_pieces(grid, rho, cum, s_mid):
    """Cell index and affine quantile coefficients for each mass level."""
    idx = np.searchsorted(cum, s_mid, side="right") - 1
    idx = np.clip(idx, 0, rho.size - 1)
    # walk off empty cells (zero-length mass intervals)
    pos = rho > 0
    if not np.all(pos[idx]):
        nxt = np.where(pos, np.arange(rho.size), rho.size)
        nxt = np.minimum.accumulate(nxt[::-1])[::-1]
        idx = np.minimum(nxt[idx], rho.size - 1)
    left = grid.extents[0][0] + idx * grid.spacing[0]
    return idx, left, cum[idx], rho[idx]


def w2_exact_1d(grid, rho, sigma):
    """Squared 2-Wasserstein distance between two 1D piecewise-constant densities.

    Quantile functions of piecewise-constant densities are piecewise linear,
    so after merging both breakpoint sets the quantile integral is computed
    exactly on each piece.

    Raises
    ------
    ValueError
        If either density is not unit mass or the masses differ by more than
        1e-12.
    """
    rho, _, ca = _masses_1d(grid, rho, "rho")
    sigma, _, cb = _masses_1d(grid, sigma, "sigma")
    for name, c in (("rho", ca), ("sigma", cb)):
        if abs(c[-1] - 1.0) > 1e-12:
            raise ValueError(f"{name} has mass {c[-1]!r}, expected 1")
    if abs(ca[-1] - cb[-1]) > 1e-12:
        raise ValueError("mass mismatch between densities")
    top = min(ca[-1], cb[-1])
    s = np.unique(np.concatenate((ca, cb)))
    s = s[s <= top]
    if s[-1] < top:
        s = np.append(s, top)
    lo, hi = s[:-1], s[1:]
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    mid = 0.5 * (lo + hi)
    _, la, sa, ra = _quantile_pieces(grid, rho, ca, mid)
    _, lb, sb, rb = _quantile_pieces(grid, sigma, cb, mid)
    d0 = (la + (lo - sa) / ra) - (lb + (lo - sb) / rb)
    d1 = (la + (hi - sa) / ra) - (lb + (hi - sb) / rb)
    return float(np.sum((hi - lo) * (d0 * d0 + d0 * d1 + d1 * d1)) / 3.0)


def transport_map_1d(grid, rho, sigma):
    """Monotone map pushing ``rho`` to ``sigma``, evaluated at cell centers.

    Only meaningful where ``rho > 0``; other cells get ``nan``.
    """
    rho, w, ca = _masses_1d(grid, rho, "rho")
    sigma, _, cb = _masses_1d(grid, sigma, "sigma")
    s = ca[:-1] + 0.5 * w
    s = np.clip(s, 0.0, cb[-1])
    _, lb, sb, rb = _quantile_pieces(grid, sigma, cb, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lb + (s - sb) / rb
    out[rho <= 0] = np.nan
    return out


def exact_potential_1d(grid, rho, sigma, h):
    """Kantorovich potential ``phi`` with ``(x - h phi'(x))`` the monotone map.

    Returns ``(phi, dphi)`` at cell centers.  ``phi`` is integrated from
    ``dphi`` by the trapezoid rule and gauged to zero ``rho``-weighted mean
    on the support.  Cells outside the support of ``rho`` get ``dphi``
    interpolated from neighbors.
    """
    x = grid.centers[0]
    t = transport_map_1d(grid, rho, sigma)
    dphi = (x - t) / h
    bad = ~np.isfinite(dphi)
    if np.all(bad):
        raise ValueError("rho has no mass")
    if np.any(bad):
        dphi[bad] = np.interp(x[bad], x[~bad], dphi[~bad])
    phi = np.concatenate(([0.0], np.cumsum(0.5 * (dphi[1:] + dphi[:-1]) * grid.spacing[0])))
    return gauge(grid, phi, rho), dphi


# ---------------------------------------------------------------------------
# entropic solver


def support_mask(rho):
    rho = np.asarray(rho, dtype=float)
    return rho > SUPPORT_REL * np.max(rho)


def gauge(grid, phi, rho):
    """Shift ``phi`` to zero ``rho``-weighted mean over ``supp rho``."""
    phi = np.array(phi, dtype=float)
    supp = support_mask(rho)
    w = np.where(supp, rho, 0.0)
    return phi - np.sum(w * np.where(supp, phi, 0.0)) / np.sum(w)


def _marginal_l1(log_target, a_log_image):
    """l1 distance between a marginal given in log form and its target."""
    return float(np.sum(np.abs(np.exp(a_log_image) - np.exp(log_target))))


def _relaxed(old, new, w):
    fin = np.isfinite(new)
    out = new.copy()
    out[fin] = (1 - w) * old[fin] + w * new[fin]
    return out


def _scaling(grid, a, b, params, init=None, costs=None):
    """Log-domain scaling iterations with an eps schedule.

    Returns ``(u, v, eps, err, sweeps)``.  The last update is on ``v`` so the
    ``b`` marginal holds to rounding; ``err`` is the ``a``-side l1 error.
    """
    costs = _axis_costs(grid) if costs is None else costs
    la, lb = _safe_log(a), _safe_log(b)
    sched = params.schedule(grid)
    if init is not None:
        u = np.where(np.isfinite(la), np.nan_to_num(init[0], neginf=0.0), -np.inf)
        v = np.where(np.isfinite(lb), np.nan_to_num(init[1], neginf=0.0), -np.inf)
        sched = sched[-1:]
    else:
        u = np.where(np.isfinite(la), 0.0, -np.inf)
        v = np.where(np.isfinite(lb), 0.0, -np.inf)
    sweeps, err = 0, np.inf
    for level, eps in enumerate(sched):
        last = level == len(sched) - 1
        tol = params.tol_marginal if last else max(params.tol_marginal, 1e-3)
        w, prev, relaxable = 1.0, np.inf, params.relax > 1.0
        while sweeps < params.max_sweeps:
            sweeps += 1
            un = eps * (la - log_kernel(grid, v / eps, eps, costs))
            u = un if w == 1.0 else _relaxed(u, un, w)
            vn = eps * (lb - log_kernel(grid, u / eps, eps, costs))
            # over-relaxation never touches the final v so the b marginal stays exact
            vr = vn if w == 1.0 else _relaxed(v, vn, w)
            v = vn
            # a-side marginal in log form: u/eps + K(v/eps)
            img = u / eps + log_kernel(grid, v / eps, eps, costs)
            err = _marginal_l1(la, np.where(np.isfinite(la), img, -np.inf))
            if not np.isfinite(err):
                raise TransportError("non-finite marginal; increase eps0", err)
            if err <= tol:
                break
            # over-relaxation is only safe near the fixed point
            if w > 1.0 and err > 2.0 * prev:
                w, vr, relaxable = 1.0, vn, False
            elif relaxable and err < 1e-2:
                w = params.relax
            prev = err
            v = vr
        if sweeps >= params.max_sweeps:
            break
    if err > params.tol_marginal:
        raise TransportError(f"scaling iterations stalled with marginal error {err:.3e}", err)
    return u, v, sched[-1], err, sweeps


def _dual_value(a, b, u, v):
    ua = np.where(a > 0, u, 0.0)
    vb = np.where(b > 0, v, 0.0)
    return float(np.sum(ua * a) + np.sum(vb * b))


def sinkhorn(grid, rho, sigma, params=None, debias=False, init=None):
    """Entropic squared 2-Wasserstein distance between two grid densities.

    Parameters
    ----------
    rho, sigma : ndarray
        Unit-mass nonnegative densities on ``grid``.
    params : EntropicParams, optional
    debias : bool
        Subtract the self-transport terms (Sinkhorn divergence).
    init : tuple of ndarray, optional
        Warm-start potentials ``(u, v)``; the schedule then starts at ``eps_min``.

    Returns
    -------
    TransportResult
        ``w2_squared`` is the dual objective ``<u, a> + <v, b>`` at the final
        potentials, with ``a, b`` the cell masses.
    """
    params = EntropicParams() if params is None else params
    rho = check_field(grid, rho, "rho")
    sigma = check_field(grid, sigma, "sigma")
    if np.any(rho < 0) or np.any(sigma < 0):
        raise ValueError("densities must be nonnegative")
    for name, r in (("rho", rho), ("sigma", sigma)):
        mass = integrate(grid, r)
        if abs(mass - 1.0) > 1e-10:
            raise ValueError(f"{name} has mass {mass!r}, expected 1")
    costs = _axis_costs(grid)
    a, b = rho * grid.cell_volume, sigma * grid.cell_volume
    u, v, eps, err, sweeps = _scaling(grid, a, b, params, init=init, costs=costs)
    value = _dual_value(a, b, u, v)
    u_self = None
    if debias:
        # <u, a> + <v, b> - (<ua, a> + <ub, b>) with ua, ub the symmetric potentials
        u_self = self_potential(grid, a, eps, params.tol_marginal, params.max_sweeps, costs=costs)
        v_self = self_potential(grid, b, eps, params.tol_marginal, params.max_sweeps, costs=costs)
        value -= _dual_value(a, b, u_self, v_self)
    pots = DualPotentials(u, v, eps, u_self)
    return TransportResult(max(value, 0.0), pots, err, sweeps, debias)


def kantorovich_potential(grid, res, rho, h):
    """Potential ``phi`` such that ``x - h grad phi`` approximates the optimal map.

    The cost here is ``|x - y|**2``, so ``phi = u / (2 h)``; it is gauged to
    zero ``rho``-weighted mean over ``supp rho``.  Cells where ``u`` is
    ``-inf`` (no mass) are filled by the c-transform of ``v``.  For debiased
    results the symmetric potential of ``rho`` is subtracted first, which makes
    ``phi`` vanish when the two densities agree.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    u = np.array(res.potentials.u, dtype=float)
    if not np.all(np.isfinite(u)):
        eps = res.potentials.eps
        lb = np.where(np.isfinite(res.potentials.v), 0.0, -np.inf)
        fill = -eps * log_kernel(grid, res.potentials.v / eps + lb, eps)
        u = np.where(np.isfinite(u), u, fill)
    if res.potentials.u_self is not None:
        u = u - res.potentials.u_self
    return gauge(grid, u / (2.0 * h), rho)


def barycentric_map(grid, res):
    """Conditional mean of the entropic plan, per source cell.

    Returns an array of shape ``(dim, *grid.shape)``.
    """
    eps, v = res.potentials.eps, res.potentials.v
    out = []
    lbase = log_kernel(grid, v / eps, eps)
    for k, y in enumerate(grid.mesh):
        # E[y_k | x] = sum_y y_k P(x, y) / a(x); y_k > 0 after shifting
        shift = grid.extents[k][0] - 1.0
        num = log_kernel(grid, v / eps + np.log(y - shift), eps)
        out.append(np.exp(num - lbase) + shift)
    return np.stack(out)


def default_eps_bias(grid, eps):
    """Certificate allowance ``2 eps log(cell count)`` for entropic bias."""
    return 2.0 * eps * math.log(grid.size)
