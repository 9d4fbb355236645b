"""Cell-centered Cartesian grids on a box and the discrete operators used on them.

Fields are plain numpy arrays whose trailing axes match ``Grid.shape``.  Leading
axes, when present, are batch axes (several fields handled at once).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Uniform cell-centered grid on the box ``prod_i [a_i, b_i]``.

    Parameters
    ----------
    extents : sequence of (float, float)
        Interval per axis.
    cells : sequence of int
        Cell count per axis, each at least 2.
    """

    extents: tuple
    cells: tuple

    def __post_init__(self):
        extents = tuple((float(a), float(b)) for a, b in self.extents)
        cells = tuple(int(n) for n in self.cells)
        if len(extents) != len(cells) or not 1 <= len(cells) <= 3:
            raise ValueError("grid needs 1 to 3 axes with one extent and one cell count each")
        for (a, b), n in zip(extents, cells):
            if not b > a:
                raise ValueError(f"empty interval [{a}, {b}]")
            if n < 1:
                raise ValueError(f"need at least 1 cell per axis, got {n}")
        object.__setattr__(self, "extents", extents)
        object.__setattr__(self, "cells", cells)

    @classmethod
    def uniform(cls, dim, n, lo=0.0, hi=1.0):
        """Grid with ``n`` cells on ``[lo, hi]`` along each of ``dim`` axes."""
        return cls(((lo, hi),) * dim, (n,) * dim)

    @property
    def dim(self):
        return len(self.cells)

    @property
    def shape(self):
        return self.cells

    @property
    def size(self):
        return int(np.prod(self.cells))

    @cached_property
    def spacing(self):
        return tuple((b - a) / n for (a, b), n in zip(self.extents, self.cells))

    @property
    def cell_volume(self):
        return float(np.prod(self.spacing))

    @property
    def volume(self):
        return float(np.prod([b - a for a, b in self.extents]))

    @property
    def diameter(self):
        return float(np.sqrt(sum((b - a) ** 2 for a, b in self.extents)))

    @cached_property
    def centers(self):
        """Per-axis 1D arrays of cell-center coordinates."""
        return tuple(a + (np.arange(n) + 0.5) * dx
                     for (a, _), n, dx in zip(self.extents, self.cells, self.spacing))

    @cached_property
    def mesh(self):
        """Tuple of ``dim`` arrays of shape ``self.shape`` with center coordinates."""
        return tuple(np.meshgrid(*self.centers, indexing="ij"))

    def face_area(self, axis):
        """Measure of a face normal to ``axis`` (1 in 1D)."""
        return float(np.prod([dx for k, dx in enumerate(self.spacing) if k != axis]))


def check_field(grid, f, name="field", batch=False):
    """Validate a scalar field and return it as a float array.

    Raises ``ValueError`` on shape mismatch or non-finite entries.
    """
    f = np.asarray(f, dtype=float)
    tail = f.shape[f.ndim - grid.dim:] if f.ndim >= grid.dim else None
    if tail != grid.shape or (not batch and f.ndim != grid.dim):
        raise ValueError(f"{name} has shape {f.shape}, expected {grid.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} has non-finite entries")
    return f


def check_phase(grid, chi, name="phase", batch=False):
    """Validate a binary phase field; returns it as an int8 array."""
    chi = np.asarray(chi)
    tail = chi.shape[chi.ndim - grid.dim:] if chi.ndim >= grid.dim else None
    if tail != grid.shape or (not batch and chi.ndim != grid.dim):
        raise ValueError(f"{name} has shape {chi.shape}, expected {grid.shape}")
    if not np.all((chi == 0) | (chi == 1)):
        raise ValueError(f"{name} must be binary")
    return chi.astype(np.int8)


def check_vector(grid, v, name="vector field"):
    """Validate a vector field of shape ``(dim, *grid.shape)``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (grid.dim,) + grid.shape:
        raise ValueError(f"{name} has shape {v.shape}, expected {(grid.dim,) + grid.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def integrate(grid, f):
    """Midpoint-rule integral over the box; sums over the trailing grid axes."""
    f = np.asarray(f, dtype=float)
    axes = tuple(range(f.ndim - grid.dim, f.ndim))
    return np.sum(f, axis=axes) * grid.cell_volume


def gradient(grid, f, no_flux=False):
    """Central differences inside, one-sided at the boundary.

    With ``no_flux=True`` the normal component is zeroed on boundary cells.
    Returns an array of shape ``(dim, *grid.shape)``.
    """
    f = check_field(grid, f)
    g = np.stack([_partial(f, grid.spacing[k], k) for k in range(grid.dim)])
    if no_flux:
        for k in range(grid.dim):
            idx = [slice(None)] * grid.dim
            idx[k] = [0, -1]
            g[k][tuple(idx)] = 0.0
    return g


def divergence(grid, v):
    """Sum of componentwise derivatives, same stencils as :func:`gradient`."""
    v = check_vector(grid, v)
    out = np.zeros(grid.shape)
    for k in range(grid.dim):
        out += _partial(v[k], grid.spacing[k], k)
    return out


def _partial(f, dx, axis):
    # a single cell has no neighbour to difference against
    if f.shape[axis] < 2:
        return np.zeros(f.shape)
    return np.gradient(f, dx, axis=axis)


@dataclass(frozen=True)
class JumpFace:
    """Interior face where the phase changes.

    ``lower`` and ``upper`` index the two cells along ``axis``; ``inside`` is
    the cell with phase 1, ``outside`` the one with phase 0.  ``orientation``
    is +1 when the outer normal of the phase set points along ``+axis``.
    """

    axis: int
    lower: tuple
    upper: tuple
    inside: tuple
    outside: tuple
    orientation: int


def jump_faces(grid, chi):
    """All axis-aligned interior faces across which ``chi`` changes."""
    chi = check_phase(grid, chi)
    faces = []
    for axis in range(grid.dim):
        d = np.diff(chi.astype(np.int16), axis=axis)
        for idx in zip(*np.nonzero(d)):
            lower = tuple(int(i) for i in idx)
            upper = tuple(i + (1 if k == axis else 0) for k, i in enumerate(lower))
            if chi[lower] == 1:
                faces.append(JumpFace(axis, lower, upper, lower, upper, +1))
            else:
                faces.append(JumpFace(axis, lower, upper, upper, lower, -1))
    return faces


def face_jump_counts(grid, chi):
    """Number of jump faces per axis; works on batched phase fields."""
    chi = np.asarray(chi, dtype=np.int16)
    off = chi.ndim - grid.dim
    return [np.count_nonzero(np.diff(chi, axis=off + k), axis=tuple(range(off, chi.ndim)))
            for k in range(grid.dim)]
