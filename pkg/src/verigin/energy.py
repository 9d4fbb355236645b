"""Free energy of a density coupled to a binary phase field.

The functional is

    E(rho, chi) = sigma * P(chi) + int f(rho) + int chi * (lam - rho) + c

with ``f(s) = s log s`` for ``m = 1`` and ``f(s) = s**m / (m - 1)`` for
``m > 1``, ``P`` the anisotropic face perimeter and ``c`` a normalizing
constant that keeps the energy nonnegative.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grid import check_field, check_phase, face_jump_counts, integrate


@dataclass(frozen=True)
class EnergyParams:
    """Model constants.

    Parameters
    ----------
    m : float
        Free-energy exponent, at least 1.
    lam : float
        Phase-transition constant, strictly positive.
    c_omega : float or None
        Additive constant. ``None`` means "use :func:`default_c_omega`".
    sigma : float
        Scale of the perimeter term.
    """

    m: float = 1.0
    lam: float = 1.0
    c_omega: float | None = None
    sigma: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.m) or self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not np.isfinite(self.lam) or self.lam <= 0:
            raise ValueError(f"lam must be > 0, got {self.lam}")
        if self.c_omega is not None and not (np.isfinite(self.c_omega) and self.c_omega >= 0):
            raise ValueError(f"c_omega must be >= 0, got {self.c_omega}")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    def resolved(self, grid):
        """Copy with ``c_omega`` filled in from the grid if it was left unset."""
        if self.c_omega is not None:
            return self
        return replace(self, c_omega=default_c_omega(self, grid))


@dataclass(frozen=True)
class EnergyBreakdown:
    perimeter: float
    internal: float
    coupling: float
    c_omega: float

    @property
    def total(self):
        return self.perimeter + self.internal + self.coupling + self.c_omega


def f(s, m):
    """Free-energy density; ``0 log 0`` is taken as 0."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("free energy density is defined for s >= 0 only")
    if m == 1:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(s > 0, s * np.log(np.where(s > 0, s, 1.0)), 0.0)
    else:
        out = s ** m / (m - 1)
    return out if out.ndim else float(out)


def f_prime(s, m):
    """Derivative of :func:`f`."""
    s = np.asarray(s, dtype=float)
    if m == 1:
        if np.any(s <= 0):
            raise ValueError("f'(s) = log s + 1 requires s > 0")
        out = np.log(s) + 1.0
    else:
        if np.any(s < 0):
            raise ValueError("f' is defined for s >= 0 only")
        out = m / (m - 1) * s ** (m - 1)
    return out if out.ndim else float(out)


def perimeter(grid, chi, batch=False):
    """Anisotropic perimeter of ``{chi = 1}`` relative to the box.

    Each interior face across which ``chi`` changes contributes its area.
    Boundary faces of the box never contribute.
    """
    chi = check_phase(grid, chi, batch=batch)
    counts = face_jump_counts(grid, chi)
    return sum(c * grid.face_area(k) for k, c in enumerate(counts))


def default_c_omega(params, grid):
    """Smallest simple constant that makes the energy nonnegative on unit-mass densities.

    ``f >= -1/e`` when ``m = 1`` and ``f >= 0`` otherwise, while the coupling
    term is bounded below by ``-int rho = -1``.
    """
    if params.m == 1:
        return grid.volume / np.e + 1.0
    return 1.0


def total_energy(grid, rho, chi, params):
    """Energy of the pair ``(rho, chi)`` split into its parts.

    Returns
    -------
    EnergyBreakdown
    """
    rho = check_field(grid, rho, "density")
    chi = check_phase(grid, chi)
    params = params.resolved(grid)
    return EnergyBreakdown(
        perimeter=params.sigma * perimeter(grid, chi),
        internal=float(integrate(grid, f(rho, params.m))),
        coupling=float(integrate(grid, chi * (params.lam - rho))),
        c_omega=float(params.c_omega),
    )


def pressure(rho, chi, params):
    """``rho**m - lam * chi`` per cell."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("density must be nonnegative")
    return rho ** params.m - params.lam * np.asarray(chi, dtype=float)


def chemical_potential(rho, chi, params):
    """``f'(rho) - chi + 1`` per cell.

    For ``m = 1`` empty cells get ``-inf`` so that callers can mask them out.
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("density must be nonnegative")
    chi = np.asarray(chi, dtype=float)
    if params.m == 1:
        out = np.full(rho.shape, -np.inf)
        pos = rho > 0
        out[pos] = np.log(rho[pos]) + 1.0
    else:
        out = f_prime(rho, params.m)
    return out - chi + 1.0
