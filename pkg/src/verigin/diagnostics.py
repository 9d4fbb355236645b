"""Numeric certificates for a computed trajectory.

Every inequality is recorded as a :class:`Check` with its two measured sides,
the signed slack ``rhs - lhs`` and a tolerance; a check passes when
``slack >= -tol``.  Failures are recorded, never raised.

Quantities without a pass/fail meaning (jump residuals, stability ratios,
Muckenhoupt constants, Euler-Lagrange residuals) are collected as
:class:`Quantity` rows.

All checks read only the fields of the trajectory (densities, phases and, in
more than one dimension, the stored potentials), so rerunning them on
reloaded files gives identical numbers.  ``W_2`` is exact in 1D and the
debiased entropic value otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize

from .energy import f_prime, perimeter
from .grid import check_field, check_phase, gradient, integrate, jump_faces
from .stepper import degiorgi_interpolate, phase_energy
from .transport import (
    default_eps_bias,
    exact_potential_1d,
    sinkhorn,
    support_mask,
    w2_exact_1d,
)

GAUSS_NODES = 5


@dataclass(frozen=True)
class Check:
    """One certified inequality ``lhs <= rhs`` with tolerance ``tol``."""

    name: str
    step: int
    lhs: float
    rhs: float
    tol: float
    note: str = ""

    @property
    def slack(self):
        return self.rhs - self.lhs

    @property
    def passed(self):
        return bool(self.slack >= -self.tol)


@dataclass(frozen=True)
class Quantity:
    """A reported number without a pass/fail meaning."""

    name: str
    step: int
    value: float


@dataclass
class StepCertificate:
    step: int
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)


@dataclass
class TrajectoryReport:
    """All certificates of a trajectory.

    ``steps`` holds one :class:`StepCertificate` per step, ``trajectory``
    the checks that involve the whole run and ``quantities`` the reported
    series.  ``w2`` is the list of per-step squared distances used throughout.
    """

    steps: list
    trajectory: list
    quantities: list
    w2: list
    w2_method: str
    tol_cert: float

    @property
    def passed(self):
        return all(s.passed for s in self.steps) and all(c.passed for c in self.trajectory)

    def failures(self):
        out = [c for s in self.steps for c in s.checks if not c.passed]
        return out + [c for c in self.trajectory if not c.passed]

    def counts(self):
        checks = [c for s in self.steps for c in s.checks] + list(self.trajectory)
        return sum(c.passed for c in checks), len(checks)


# ---------------------------------------------------------------------------
# shared ingredients


def cert_tol(traj):
    """``10 outer_tol + 2 eps_min log(cells)``."""
    cfg = traj.config
    eps = cfg.entropic.resolved_eps_min(traj.grid)
    return 10.0 * cfg.outer_tol + default_eps_bias(traj.grid, eps)


def w2_method(grid):
    return "exact-1d" if grid.dim == 1 else "entropic-debiased"


def w2_between(grid, rho, sigma, params=None):
    """Squared distance used by all checks: exact in 1D, debiased entropic otherwise."""
    if grid.dim == 1:
        return w2_exact_1d(grid, rho, sigma)
    return sinkhorn(grid, rho, sigma, params, debias=True).w2_squared


def step_w2(traj):
    """``W_2(rho_n, rho_{n-1})**2`` for ``n = 1..N``."""
    prm = traj.config.entropic
    return [w2_between(traj.grid, traj.rho(n), traj.rho(n - 1), prm)
            for n in range(1, len(traj) + 1)]


def step_potential(traj, n):
    """Kantorovich potential of step ``n``: exact in 1D, the stored one otherwise."""
    if traj.grid.dim == 1:
        return exact_potential_1d(traj.grid, traj.rho(n), traj.rho(n - 1), traj.h)[0]
    return np.asarray(traj.steps[n - 1].phi, dtype=float)


def velocity(traj, n):
    """``grad phi_n`` as an array of shape ``(dim, *grid.shape)``.

    In 1D this is ``(x - T(x)) / h`` with ``T`` the monotone map to the
    previous density.
    """
    if traj.grid.dim == 1:
        return exact_potential_1d(traj.grid, traj.rho(n), traj.rho(n - 1), traj.h)[1][None]
    return gradient(traj.grid, traj.steps[n - 1].phi)


def _energy(traj, n):
    return traj.energy(n).total


# ---------------------------------------------------------------------------
# energy inequalities


def check_dissipation(traj, w2=None, tol=None):
    """Per-step ``W**2/(2h) + E_n <= E_{n-1}`` and the cumulative form.

    Returns
    -------
    (list of Check, Check)
    """
    w2 = step_w2(traj) if w2 is None else w2
    tol = cert_tol(traj) if tol is None else tol
    h = traj.h
    per = [Check("dissipation", n, w2[n - 1] / (2 * h) + _energy(traj, n), _energy(traj, n - 1), tol)
           for n in range(1, len(traj) + 1)]
    n_last = len(traj)
    total = Check("dissipation_total", n_last,
                  _energy(traj, n_last) + sum(w2) / (2 * h), _energy(traj, 0), tol)
    return per, total


def sample_times(traj, count=20):
    """``count`` equally spaced times covering ``[0, N h]``."""
    return np.linspace(0.0, len(traj) * traj.h, count)


def check_holder(traj, times=None, tol_rel=1e-6):
    """``W_2(rho(t), rho(s)) <= sqrt(2 E_0 (t - s))`` over sampled pairs with ``t - s >= h``.

    ``rho(t)`` is the piecewise-constant interpolation.  The reported check is
    the pair with the smallest relative slack.  Outside 1D the tolerance also
    absorbs the square root of the entropic allowance.
    """
    times = sample_times(traj) if times is None else np.asarray(times, float)
    grid, h = traj.grid, traj.h
    e0 = _energy(traj, 0)
    extra = 0.0 if grid.dim == 1 else math.sqrt(cert_tol(traj))
    cache = {}
    worst = None
    for i, s in enumerate(times):
        for t in times[i + 1:]:
            if t - s < h * (1 - 1e-12):
                continue
            a, b = traj.index_at(s), traj.index_at(t)
            if (a, b) not in cache:
                cache[a, b] = 0.0 if a == b else math.sqrt(
                    w2_between(grid, traj.rho(b), traj.rho(a), traj.config.entropic))
            lhs = cache[a, b]
            rhs = math.sqrt(2.0 * e0 * (t - s))
            rel = (rhs - lhs) / rhs
            if worst is None or rel < worst[0]:
                worst = (rel, lhs, rhs, s, t)
    if worst is None:
        return Check("holder", len(traj), 0.0, 0.0, 0.0, "no admissible pair")
    _, lhs, rhs, s, t = worst
    return Check("holder", len(traj), lhs, rhs, tol_rel * rhs + extra, f"s={float(s)!r} t={float(t)!r}")


def check_degiorgi(traj, n, w2n=None, nodes=GAUSS_NODES, tol=None):
    """De Giorgi inequality for step ``n`` with Gauss-Legendre quadrature on ``(0, h]``.

    ``W**2/(2h) + 1/2 int_0^h (W(rho~(t), rho_{n-1}) / t)**2 dt <= E_{n-1} - E_n``
    where ``rho~(t)`` minimizes the step objective with ``h`` replaced by ``t``.
    Interpolants are solved from a cold start so the result depends only on
    the stored fields.
    """
    grid, cfg, h = traj.grid, traj.config, traj.h
    tol = cert_tol(traj) if tol is None else tol
    prev, chi_prev = traj.rho(n - 1), traj.chi(n - 1)
    if w2n is None:
        w2n = w2_between(grid, traj.rho(n), prev, cfg.entropic)
    x, w = np.polynomial.legendre.leggauss(nodes)
    integral = 0.0
    for xq, wq in zip(x, w):
        t = 0.5 * h * (1.0 + xq)
        mid = degiorgi_interpolate(grid, prev, chi_prev, t, cfg)
        integral += 0.5 * h * wq * w2_between(grid, mid.rho, prev, cfg.entropic) / t ** 2
    lhs = w2n / (2.0 * h) + 0.5 * integral
    return Check("degiorgi", n, lhs, _energy(traj, n - 1) - _energy(traj, n), tol)


# ---------------------------------------------------------------------------
# optimality and the phase


def check_optimality(traj, n, rel=1e-2, abs_tol=1e-9, slack_out=1e-3):
    """First-order conditions of the density at step ``n``.

    On ``supp rho`` the residual ``r = f'(rho) - chi + phi`` must be constant;
    the first check compares its ``rho``-weighted standard deviation with
    ``rel * scale``, where ``scale`` is the range of ``f'(rho) - chi`` on the
    support.  Off the support ``r >= c`` must hold, with ``c`` the weighted
    mean of ``r``; the second check records the worst violation against
    ``slack_out``.
    """
    p = traj.config.energy
    rho = traj.rho(n)
    chi = traj.chi(n).astype(float)
    phi = step_potential(traj, n)
    supp = support_mask(rho)
    w = rho[supp]
    base = np.zeros_like(rho)
    base[supp] = f_prime(rho[supp], p.m) - chi[supp]
    if p.m != 1:
        base[~supp] = f_prime(np.maximum(rho[~supp], 0.0), p.m) - chi[~supp]
    r = base + phi
    mean = float(np.sum(w * r[supp]) / np.sum(w))
    std = float(math.sqrt(max(np.sum(w * (r[supp] - mean) ** 2) / np.sum(w), 0.0)))
    scale = float(np.ptp(base[supp])) if np.count_nonzero(supp) > 1 else 0.0
    inside = Check("optimality", n, std, rel * scale, abs_tol, f"scale={scale!r}")
    if np.all(supp) or p.m == 1:
        outside = Check("optimality_outside", n, 0.0, 0.0, slack_out, "empty complement")
    else:
        worst = float(np.min(r[~supp] - mean))
        outside = Check("optimality_outside", n, -worst, 0.0, slack_out)
    return [inside, outside]


def random_competitors(grid, count, rng, max_pieces=3):
    """Seeded unions of random boxes (intervals in 1D)."""
    out = []
    for _ in range(count):
        chi = np.zeros(grid.shape, dtype=np.int8)
        for _ in range(int(rng.integers(1, max_pieces + 1))):
            idx = []
            for n in grid.shape:
                a, b = sorted(rng.integers(0, n + 1, size=2))
                idx.append(slice(int(a), int(max(b, a + 1))))
            chi[tuple(idx)] = 1
        out.append(chi)
    return out


def standard_competitors(grid, chi, count=20, seed=0):
    """Empty, full, the phase itself, its complement and ``count`` random sets."""
    rng = np.random.default_rng(seed)
    fixed = [np.zeros(grid.shape, np.int8), np.ones(grid.shape, np.int8),
             np.asarray(chi, np.int8), 1 - np.asarray(chi, np.int8)]
    return fixed + random_competitors(grid, count, rng)


def almost_minimizing_scale(grid, rho, chi, params):
    p = params.resolved(grid)
    return 1.0 + abs(float(phase_energy(grid, rho, chi, p))) + float(integrate(grid, rho)) \
        + p.lam * grid.volume


def check_almost_minimizing(traj, n, competitors, rel_tol=1e-9):
    """``sigma P(chi_n) - int chi_n rho_n <= sigma P(E) - int chi_E rho_n + lam |E sym_diff E_n|``.

    Returns one check per competitor.
    """
    grid = traj.grid
    p = traj.config.energy.resolved(grid)
    rho, chi = traj.rho(n), traj.chi(n)
    tol = rel_tol * almost_minimizing_scale(grid, rho, chi, p)

    def part(c):
        return p.sigma * perimeter(grid, c) - float(integrate(grid, c * rho))

    lhs = part(chi)
    out = []
    for comp in competitors:
        comp = check_phase(grid, comp, "competitor")
        rhs = part(comp) + p.lam * float(integrate(grid, np.abs(comp.astype(float) - chi)))
        out.append(Check("almost_minimizing", n, lhs, rhs, tol))
    return out


def worst(checks, name=None):
    """The check with the smallest slack relative to its tolerance."""
    best = min(checks, key=lambda c: c.slack + c.tol)
    if name is None:
        return best
    return Check(name, best.step, best.lhs, best.rhs, best.tol, best.note)


def jump_residuals(grid, rho, chi, m):
    """``f'(rho_out) - f'(rho_in) + 1`` at every jump face with both cells in the support.

    ``rho_in`` is the cell with phase 1.  Returns an array (possibly empty).
    """
    rho = check_field(grid, rho, "rho")
    supp = support_mask(rho)
    out = []
    for face in jump_faces(grid, chi):
        if supp[face.inside] and supp[face.outside]:
            out.append(f_prime(rho[face.outside], m) - f_prime(rho[face.inside], m) + 1.0)
    return np.asarray(out, dtype=float)


def check_jump(traj, n):
    """Largest jump residual at step ``n`` (0 when there is no interface)."""
    r = jump_residuals(traj.grid, traj.rho(n), traj.chi(n), traj.config.energy.m)
    return Quantity("jump_max", n, float(np.max(np.abs(r))) if r.size else 0.0)


# ---------------------------------------------------------------------------
# test vector fields and first variations


@dataclass(frozen=True)
class TestField:
    """Smooth vector field given by callables on coordinate tuples.

    ``value(*coords)`` returns ``dim`` arrays and ``jacobian(*coords)``
    returns ``J[i][j] = d xi_i / d x_j``.
    """

    value: object
    jacobian: object
    label: str = ""

    def at_centers(self, grid):
        return np.stack([np.broadcast_to(v, grid.shape) for v in self.value(*grid.mesh)])

    def divergence_at(self, *coords):
        jac = self.jacobian(*coords)
        return sum(jac[i][i] for i in range(len(coords)))


def sine_window_fields(grid, count=5):
    """1D fields ``sin(k pi s) sin(pi s)**2``, ``s`` the unit coordinate, ``k = 1..count``.

    They vanish with their derivative at both ends of the interval.
    """
    if grid.dim != 1:
        raise ValueError("sine window fields are one-dimensional")
    a, b = grid.extents[0]
    L = b - a
    out = []
    for k in range(1, count + 1):
        def value(x, k=k):
            s = (x - a) / L
            return (np.sin(k * np.pi * s) * np.sin(np.pi * s) ** 2,)

        def jacobian(x, k=k):
            s = (x - a) / L
            d = (k * np.pi * np.cos(k * np.pi * s) * np.sin(np.pi * s) ** 2
                 + np.sin(k * np.pi * s) * 2 * np.pi * np.sin(np.pi * s) * np.cos(np.pi * s))
            return ((d / L,),)

        out.append(TestField(value, jacobian, f"sine{k}"))
    return out


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t ** 3 * (10 - 15 * t + 6 * t * t), 30 * t * t * (1 - t) ** 2


def plateau_field(grid, axis=0, inner=(0.3, 0.7), outer=(0.1, 0.9)):
    """Unit vector along ``axis`` times a C2 bump equal to 1 on ``inner`` (unit coordinates)."""
    d = grid.dim

    def bump(s):
        up, dup = _smoothstep((s - outer[0]) / (inner[0] - outer[0]))
        dn, ddn = _smoothstep((outer[1] - s) / (outer[1] - inner[1]))
        return up * dn, dup / (inner[0] - outer[0]) * dn - up * ddn / (outer[1] - inner[1])

    def parts(coords):
        vals, ders = [], []
        for k, x in enumerate(coords):
            a, b = grid.extents[k]
            v, dv = bump((x - a) / (b - a))
            vals.append(v)
            ders.append(dv / (b - a))
        return vals, ders

    def value(*coords):
        vals, _ = parts(coords)
        prod = np.prod(np.broadcast_arrays(*vals), axis=0)
        return tuple(prod if k == axis else np.zeros_like(prod) for k in range(d))

    def jacobian(*coords):
        vals, ders = parts(coords)
        rows = []
        for i in range(d):
            row = []
            for j in range(d):
                if i != axis:
                    row.append(np.zeros(np.broadcast(*vals).shape))
                else:
                    terms = [ders[k] if k == j else vals[k] for k in range(d)]
                    row.append(np.prod(np.broadcast_arrays(*terms), axis=0))
            rows.append(tuple(row))
        return tuple(rows)

    return TestField(value, jacobian, f"plateau{axis}")


def divergence_free_fields(grid, count=5, seed=0, amplitude=1.0):
    """Random 2D fields ``(d_y psi, -d_x psi)`` with ``psi`` vanishing to second order on the box.

    ``psi = s**2 (1-s)**2 t**2 (1-t)**2 P(s, t)`` with ``P`` a seeded random
    polynomial of degree 2 in the unit coordinates ``s, t``.
    """
    if grid.dim != 2:
        raise ValueError("divergence-free fields are built in 2D only")
    P = np.polynomial.polynomial
    (a0, b0), (a1, b1) = grid.extents
    Lx, Ly = b0 - a0, b1 - a1
    w = np.array([0.0, 0.0, 1.0, -2.0, 1.0])   # s^2 (1-s)^2
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        c = rng.normal(size=(3, 3))
        c[1:, 2] = 0.0
        c[2, 1:] = 0.0
        psi = amplitude * _polymul2d(np.outer(w, w), c)
        dx = P.polyder(psi, axis=0) / Lx
        dy = P.polyder(psi, axis=1) / Ly
        # xi = (dy, -dx); jacobian entries from second derivatives
        dxx = P.polyder(dx, axis=0) / Lx
        dxy = P.polyder(dx, axis=1) / Ly
        dyx = P.polyder(dy, axis=0) / Lx
        dyy = P.polyder(dy, axis=1) / Ly

        def ev(coef, x, y):
            return P.polyval2d((x - a0) / Lx, (y - a1) / Ly, coef)

        def value(x, y, dx=dx, dy=dy):
            return (ev(dy, x, y), -ev(dx, x, y))

        def jacobian(x, y, dxx=dxx, dxy=dxy, dyx=dyx, dyy=dyy):
            return ((ev(dyx, x, y), ev(dyy, x, y)), (-ev(dxx, x, y), -ev(dxy, x, y)))

        out.append(TestField(value, jacobian, f"divfree{k}"))
    return out


def _polymul2d(a, b):
    out = np.zeros((a.shape[0] + b.shape[0] - 1, a.shape[1] + b.shape[1] - 1))
    for i, j in zip(*np.nonzero(b)):
        out[i:i + a.shape[0], j:j + a.shape[1]] += b[i, j] * a
    return out


def interface_variation(grid, chi, field_):
    """``int (div xi - nu . D xi nu) d|grad chi|`` with axis-aligned face normals.

    Vanishes identically in 1D.
    """
    if grid.dim == 1:
        return 0.0
    total = 0.0
    for face in jump_faces(grid, chi):
        k = face.axis
        pt = []
        for j, c in enumerate(grid.centers):
            x = c[face.lower[j]]
            pt.append(np.asarray(x + (0.5 * grid.spacing[j] if j == k else 0.0)))
        jac = field_.jacobian(*pt)
        tangential = sum(jac[j][j] for j in range(grid.dim) if j != k)
        total += float(tangential) * grid.face_area(k)
    return total


def first_variation(grid, rho, chi, params, field_, exponent=None):
    """``sigma * interface_variation - int rho**p div xi + lam int chi div xi``.

    This is the derivative of the energy along the flow of ``xi``;
    ``exponent`` replaces ``m`` in the pressure ``rho**m`` (fault injection).
    """
    p = params.resolved(grid)
    e = p.m if exponent is None else exponent
    div = np.broadcast_to(field_.divergence_at(*grid.mesh), grid.shape)
    return (p.sigma * interface_variation(grid, chi, field_)
            - float(integrate(grid, np.asarray(rho) ** e * div))
            + p.lam * float(integrate(grid, chi * div)))


def euler_lagrange_terms(traj, n, field_, exponent=None):
    """``(LHS, RHS)`` with ``LHS = -int rho grad phi . xi`` and RHS the first variation."""
    rho, chi = traj.rho(n), traj.chi(n)
    u = velocity(traj, n)
    xi = field_.at_centers(traj.grid)
    lhs = -float(integrate(traj.grid, rho * np.sum(u * xi, axis=0)))
    rhs = first_variation(traj.grid, rho, chi, traj.config.energy, field_, exponent)
    return lhs, rhs


def check_euler_lagrange(traj, n, fields, exponent=None):
    """Largest ``|LHS - RHS|`` over ``fields`` at step ``n``."""
    res = 0.0
    for fld in fields:
        lhs, rhs = euler_lagrange_terms(traj, n, fld, exponent)
        res = max(res, abs(lhs - rhs))
    return Quantity("el_residual", n, res)


def slope_lower_bound(grid, rho, chi, params, field_):
    """``-dE(xi) - 1/2 int rho |xi|**2``: a lower bound for half the squared slope."""
    xi = field_.at_centers(grid)
    return (-first_variation(grid, rho, chi, params, field_)
            - 0.5 * float(integrate(grid, rho * np.sum(xi * xi, axis=0))))


def check_optimal_dissipation(traj, fields, w2=None, tol=None):
    """Discrete energy-dissipation relation tested with time-independent fields.

    ``E_N + sum W**2/(2h) + sum_n h S_n(xi) <= E_0`` with ``S_n`` from
    :func:`slope_lower_bound` at ``(rho_n, chi_n)``.  One check per field.
    """
    w2 = step_w2(traj) if w2 is None else w2
    tol = cert_tol(traj) if tol is None else tol
    h, N = traj.h, len(traj)
    base = _energy(traj, N) + sum(w2) / (2.0 * h)
    out = []
    for fld in fields:
        s = sum(slope_lower_bound(traj.grid, traj.rho(n), traj.chi(n), traj.config.energy, fld)
                for n in range(1, N + 1))
        out.append(Check("optimal_dissipation", N, base + h * s, _energy(traj, 0), tol, fld.label))
    return out


def transport_residual(traj, eta, grad_eta):
    """Residual of the discrete weak continuity equation.

    ``eta(t, *coords)`` is a test function and ``grad_eta(t, *coords)`` its
    spatial gradient (``dim`` arrays).  The residual is

        int rho_N eta_N - int rho_0 eta_0
        - sum_n [int rho_n (eta_n - eta_{n-1}) + h int rho_n u_n . grad eta_n]

    with ``u_n = grad phi_n``.  It vanishes for constant ``eta`` up to the
    mass drift.
    """
    grid, h, N = traj.grid, traj.h, len(traj)

    def ev(t):
        return np.broadcast_to(eta(t, *grid.mesh), grid.shape)

    total = float(integrate(grid, traj.rho(N) * ev(N * h)) - integrate(grid, traj.rho(0) * ev(0.0)))
    for n in range(1, N + 1):
        t = n * h
        rho = traj.rho(n)
        g = np.stack([np.broadcast_to(c, grid.shape) for c in grad_eta(t, *grid.mesh)])
        total -= float(integrate(grid, rho * (ev(t) - ev(t - h))))
        total -= h * float(integrate(grid, rho * np.sum(velocity(traj, n) * g, axis=0)))
    return total


# ---------------------------------------------------------------------------
# stability and weights


def _exponent(dim):
    d = max(dim, 2)
    return d / (d - 1.0), d


def stability_ratio(traj, n, k=1):
    """Ingredients of the phase stability estimate between steps ``n`` and ``n + k``.

    Returns a dict with ``lhs``, ``lp`` (``L^p`` distance of the densities,
    ``p = 1`` for ``m <= 2`` and ``m / 2`` otherwise), ``dissipation``
    (sum of ``int |grad phi|**2 rho`` at both steps), ``p`` and ``ratio``.
    In 1D the exponent ``d / (d - 1)`` is evaluated with ``d = 2``.
    """
    grid = traj.grid
    q, d = _exponent(grid.dim)
    m = traj.config.energy.m
    p = 1.0 if m <= 2 else m / 2.0
    r0, r1 = traj.rho(n), traj.rho(n + k)
    c0, c1 = traj.chi(n).astype(float), traj.chi(n + k).astype(float)
    weight = np.minimum(np.minimum(r0, r1), 1.0) ** q
    lhs = float(integrate(grid, np.abs(c0 - c1) * weight))
    lp = float(integrate(grid, np.abs(r0 - r1) ** p)) ** (1.0 / p)
    diss = 0.0
    for j in (n, n + k):
        if j >= 1:
            u = velocity(traj, j)
            diss += float(integrate(grid, np.sum(u * u, axis=0) * traj.rho(j)))
    e = d / (2.0 * (d - 1.0))
    denom = lp + lp ** e * diss ** e
    ratio = lhs / denom if denom > 0 else (0.0 if lhs == 0 else math.inf)
    return {"lhs": lhs, "lp": lp, "dissipation": diss, "p": p, "ratio": ratio}


def stability_report(traj, k=1):
    """Ratio series for all pairs ``(n, n + k)`` with ``n >= 1``."""
    return [Quantity("stability_ratio", n, stability_ratio(traj, n, k)["ratio"])
            for n in range(1, len(traj) - k + 1)]


def alpha_d(d):
    """``(d + 1)/(2d) * ((d - 1)/(2d))**((d - 1)/(d + 1))``, the conjugate of the phase-stability gauge at 1."""
    if int(d) != d or d < 2:
        raise ValueError(f"d must be an integer >= 2, got {d}")
    out = (d + 1) / (2 * d) * ((d - 1) / (2 * d)) ** ((d - 1) / (d + 1))
    if not 0 < out < 1:
        raise ArithmeticError(f"alpha_d({d}) = {out} outside (0, 1)")
    return out


def gauge_g(u, d):
    """``|u|**(2d/(d-1))`` on ``|u| <= 1`` and ``(2|u| - 1)**(d/(d-1))`` beyond."""
    u = np.abs(np.asarray(u, float))
    return np.where(u <= 1, u ** (2 * d / (d - 1)), (2 * np.maximum(u, 1) - 1) ** (d / (d - 1)))


def alpha_d_numeric(d, v=1.0):
    """``sup_u (u v - g(u))`` by bounded scalar maximization (independent of :func:`alpha_d`)."""
    best = -math.inf
    # the supremum sits where g'(u) = v; bracket both branches of g
    for lo, hi in ((0.0, 1.0), (1.0, 1.0 + abs(v) + 1.0), (-1.0, 0.0)):
        res = optimize.minimize_scalar(lambda u: -(u * v - float(gauge_g(u, d))),
                                       bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-14, "maxiter": 2000})
        best = max(best, -res.fun)
    return best


def _ball_footprint(grid, r):
    half = [int(math.floor(r / dx)) for dx in grid.spacing]
    axes = [np.arange(-n, n + 1) * dx for n, dx in zip(half, grid.spacing)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return sum(m * m for m in mesh) <= r * r * (1 + 1e-12)


def default_radii(grid, count=8):
    return np.geomspace(2 * max(grid.spacing), grid.diameter, count)


def muckenhoupt_a1(grid, w, radii=None):
    """Largest ratio of ball average to ball minimum over all cell-centered balls.

    Balls are intersected with the box.  Returns ``inf`` when some ball has
    a zero minimum and positive average.
    """
    w = check_field(grid, w, "weight")
    if np.any(w < 0):
        raise ValueError("weight must be nonnegative")
    radii = default_radii(grid) if radii is None else radii
    best = 0.0
    ones = np.ones(grid.shape)
    for r in radii:
        fp = _ball_footprint(grid, float(r))
        k = fp.astype(float)
        tot = ndimage.correlate(w, k, mode="constant", cval=0.0)
        cnt = ndimage.correlate(ones, k, mode="constant", cval=0.0)
        mn = ndimage.minimum_filter(w, footprint=fp, mode="constant", cval=np.inf)
        avg = tot / cnt
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(mn > 0, avg / np.where(mn > 0, mn, 1.0), np.where(avg > 0, np.inf, 1.0))
        best = max(best, float(np.max(ratio)))
    return best


def muckenhoupt_weight(grid, rho):
    """``(min(rho, 1))**(d/(d-1))`` with ``d = max(dim, 2)``."""
    q, _ = _exponent(grid.dim)
    return np.minimum(np.asarray(rho, float), 1.0) ** q


# ---------------------------------------------------------------------------
# full report


@dataclass(frozen=True)
class CheckOptions:
    """Which diagnostics to run and with what sampling."""

    dissipation: bool = True
    optimality: bool = True
    almost_minimizing: bool = True
    competitors: int = 20
    seed: int = 0
    holder: bool = True
    holder_times: int = 20
    degiorgi_steps: int = 5
    optimal_dissipation: bool = True
    jump: bool = True
    euler_lagrange: bool = True
    stability: bool = True
    muckenhoupt: bool = True

    def per_step_names(self):
        names = []
        if self.dissipation:
            names.append("dissipation")
        if self.optimality:
            names += ["optimality", "optimality_outside"]
        if self.almost_minimizing:
            names.append("almost_minimizing")
        return names


def default_fields(grid, seed=0):
    if grid.dim == 1:
        return sine_window_fields(grid)
    if grid.dim == 2:
        return divergence_free_fields(grid, seed=seed)
    return [plateau_field(grid, k) for k in range(grid.dim)]


def certify(traj, options=None):
    """Run all enabled diagnostics on ``traj``.

    Per-step rows are, in order: ``dissipation``, ``optimality``,
    ``optimality_outside`` and ``almost_minimizing`` (the worst competitor).
    """
    opt = CheckOptions() if options is None else options
    grid, N = traj.grid, len(traj)
    tol = cert_tol(traj)
    w2 = step_w2(traj)
    per, total = check_dissipation(traj, w2, tol)
    rng = np.random.default_rng(opt.seed)
    steps = []
    quantities = []
    for n in range(1, N + 1):
        cert = StepCertificate(n)
        if opt.dissipation:
            cert.checks.append(per[n - 1])
        if opt.optimality:
            cert.checks += check_optimality(traj, n)
        if opt.almost_minimizing:
            comps = standard_competitors(grid, traj.chi(n), 0) + random_competitors(
                grid, opt.competitors, rng)
            cert.checks.append(worst(check_almost_minimizing(traj, n, comps), "almost_minimizing"))
        steps.append(cert)
    trajectory = []
    if opt.dissipation:
        trajectory.append(total)
    if opt.holder and N > 0:
        trajectory.append(check_holder(traj, sample_times(traj, opt.holder_times)))
    for n in range(1, min(opt.degiorgi_steps, N) + 1):
        trajectory.append(check_degiorgi(traj, n, w2[n - 1], tol=tol))
    fields = default_fields(grid, opt.seed)
    if opt.optimal_dissipation and N > 0:
        trajectory += check_optimal_dissipation(traj, fields, w2, tol)
    for n in range(1, N + 1):
        if opt.jump:
            quantities.append(check_jump(traj, n))
        if opt.euler_lagrange:
            quantities.append(check_euler_lagrange(traj, n, fields))
        if opt.muckenhoupt:
            quantities.append(Quantity("muckenhoupt_c", n,
                                       muckenhoupt_a1(grid, muckenhoupt_weight(grid, traj.rho(n)))))
    if opt.stability:
        quantities += stability_report(traj)
    if N > 0:
        quantities.append(Quantity("final_energy_rate", N,
                                   (_energy(traj, N - 1) - _energy(traj, N)) / traj.h))
    return TrajectoryReport(steps, trajectory, quantities, w2, w2_method(grid), tol)


__all__ = [
    "Check", "Quantity", "StepCertificate", "TrajectoryReport", "CheckOptions", "TestField",
    "cert_tol", "w2_between", "step_w2", "velocity", "check_dissipation", "check_holder",
    "check_degiorgi", "check_optimality", "check_almost_minimizing", "check_jump",
    "jump_residuals", "check_euler_lagrange", "euler_lagrange_terms", "first_variation",
    "check_optimal_dissipation", "transport_residual", "stability_ratio", "stability_report",
    "alpha_d", "alpha_d_numeric", "gauge_g", "muckenhoupt_a1", "muckenhoupt_weight",
    "sine_window_fields", "plateau_field", "divergence_free_fields", "standard_competitors",
    "random_competitors", "certify",
]
