"""Plain-text persistence of runs: fields, time series, certificates, manifest.

Floats are written with 17 significant digits, which round-trips every
64-bit value.  Every file is written to a temporary name in the target
directory and renamed into place.
"""

from __future__ import annotations

import csv
import io
import math
import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .energy import total_energy
from .grid import check_field, check_phase, integrate
from .stepper import StepResult, Trajectory

TIMESERIES_HEADER = ["step", "time", "energy", "perimeter", "internal", "coupling",
                     "w2sq_over_2h", "mass", "min_rho", "outer_iters"]
CHECK_HEADER = ["step", "check", "lhs", "rhs", "slack", "tol", "pass"]
REPORT_HEADER = ["step", "quantity", "value"]

CONFIG_FILE = "config.txt"
TIMESERIES_FILE = "timeseries.csv"
CERTIFICATES_FILE = "certificates.csv"
TRAJECTORY_CHECKS_FILE = "trajectory_checks.csv"
REPORTS_FILE = "reports.csv"
MANIFEST_FILE = "manifest.txt"
FIELDS_DIR = "fields"


def fmt(x):
    """17 significant digits; integers stay integers."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename.

    Raises
    ------
    OSError
        If the directory cannot be created or written.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue()


def read_csv(path):
    """Rows of a CSV file as dictionaries of strings."""
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# fields


def field_text(values):
    """``dims N1 [N2] [N3]`` then the values in row-major order, one per line."""
    a = np.asarray(values)
    head = "dims " + " ".join(str(n) for n in a.shape)
    body = "\n".join(fmt(v) for v in np.asarray(a, dtype=float).ravel(order="C"))
    return head + "\n" + body + ("\n" if body else "")


def write_field(path, values):
    atomic_write(path, field_text(values))


def read_field(path):
    """Inverse of :func:`write_field`.

    Raises
    ------
    ValueError
        If the header is missing or the value count does not match it.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    m = re.fullmatch(r"dims((?: \d+)+)", lines[0].strip())
    if m is None:
        raise ValueError(f"{path}: first line must be 'dims N1 [N2] [N3]'")
    shape = tuple(int(t) for t in m.group(1).split())
    vals = [float(t) for t in lines[1:] if t.strip()]
    if len(vals) != math.prod(shape):
        raise ValueError(f"{path}: expected {math.prod(shape)} values, found {len(vals)}")
    return np.array(vals, dtype=float).reshape(shape)


def field_path(run_dir, kind, n):
    return Path(run_dir) / FIELDS_DIR / f"{kind}_{n:04d}.txt"


def checkpoint_steps(n_steps, every):
    """Steps whose fields are dumped: every ``every``-th one plus the first and last."""
    return sorted({0, n_steps} | set(range(0, n_steps + 1, every)))


def write_fields(run_dir, traj, every=1):
    for n in checkpoint_steps(len(traj), every):
        write_field(field_path(run_dir, "rho", n), traj.rho(n))
        write_field(field_path(run_dir, "chi", n), traj.chi(n))
        if n > 0:
            write_field(field_path(run_dir, "phi", n), traj.steps[n - 1].phi)


# ---------------------------------------------------------------------------
# tables


def timeseries_rows(traj, w2):
    """One row per step including step 0; ``w2[n-1]`` is the squared distance of step ``n``."""
    grid, h = traj.grid, traj.h
    rows = []
    for n in range(len(traj) + 1):
        e = traj.energy(n)
        rho = traj.rho(n)
        rows.append([
            n, n * h, e.total, e.perimeter, e.internal, e.coupling,
            0.0 if n == 0 else w2[n - 1] / (2.0 * h),
            float(integrate(grid, rho)), float(np.min(rho)),
            0 if n == 0 else int(traj.steps[n - 1].outer_iters),
        ])
    return rows


def write_timeseries(run_dir, traj, w2):
    atomic_write(Path(run_dir) / TIMESERIES_FILE, _csv_text(TIMESERIES_HEADER, timeseries_rows(traj, w2)))


def check_rows(checks):
    return [[c.step, c.name, c.lhs, c.rhs, c.slack, c.tol, c.passed] for c in checks]


def write_report(run_dir, report):
    """``certificates.csv`` (per-step checks), ``trajectory_checks.csv`` and ``reports.csv``."""
    run_dir = Path(run_dir)
    per_step = [c for s in report.steps for c in s.checks]
    atomic_write(run_dir / CERTIFICATES_FILE, _csv_text(CHECK_HEADER, check_rows(per_step)))
    atomic_write(run_dir / TRAJECTORY_CHECKS_FILE,
                 _csv_text(CHECK_HEADER, check_rows(report.trajectory)))
    atomic_write(run_dir / REPORTS_FILE,
                 _csv_text(REPORT_HEADER, [[q.step, q.name, q.value] for q in report.quantities]))


# ---------------------------------------------------------------------------
# manifest


def manifest_text(config_echo, versions, wall_clock, summary_rows, counts=None, partial=False,
                  error=None, extra=None):
    """Human-readable run record.

    ``summary_rows`` are ``(step, energy, w2sq_over_2h, outer_iters, passed)``
    tuples, ``passed`` being ``None`` when no certificates were computed.
    """
    out = [f"status: {'partial' if partial else 'complete'}"]
    if error:
        out.append(f"error: {error}")
    for k, v in (extra or {}).items():
        out.append(f"{k}: {v}")
    out.append(f"wall_clock_seconds: {wall_clock:.3f}")
    out += [f"version.{k}: {v}" for k, v in versions.items()]
    if counts is not None:
        out.append(f"certificates_passed: {counts[0]}/{counts[1]}")
    out.append("")
    out.append("[config]")
    out.append(config_echo.rstrip("\n"))
    out.append("")
    out.append("[steps]")
    out.append("step,energy,w2sq_over_2h,outer_iters,certified")
    for n, e, w, it, ok in summary_rows:
        flag = "-" if ok is None else ("pass" if ok else "FAIL")
        out.append(f"{n},{fmt(e)},{fmt(w)},{it},{flag}")
    return "\n".join(out) + "\n"


def write_manifest(run_dir, text):
    atomic_write(Path(run_dir) / MANIFEST_FILE, text)


# ---------------------------------------------------------------------------
# reload


def load_trajectory(run_dir, grid, step_config, n_steps=None):
    """Rebuild a :class:`Trajectory` from the dumped fields of ``run_dir``.

    Energies are recomputed from the reloaded fields, which reproduces the
    stored values exactly.  Solver-only data (dual potentials, objective)
    are not persisted and come back empty.

    Raises
    ------
    FileNotFoundError
        If any step between 0 and ``n_steps`` has no dump.
    """
    run_dir = Path(run_dir)
    if n_steps is None:
        n_steps = len(read_csv(run_dir / TIMESERIES_FILE)) - 1
    rho0 = check_field(grid, read_field(field_path(run_dir, "rho", 0)), "rho0")
    chi0 = check_phase(grid, read_field(field_path(run_dir, "chi", 0)).astype(np.int8))
    e0 = total_energy(grid, rho0, chi0, step_config.energy)
    cfg = step_config.resolved(grid, e0.total)
    traj = Trajectory(grid, cfg, rho0, chi0, e0)
    ts = read_csv(run_dir / TIMESERIES_FILE)
    for n in range(1, n_steps + 1):
        rho = read_field(field_path(run_dir, "rho", n))
        chi = read_field(field_path(run_dir, "chi", n)).astype(np.int8)
        phi = read_field(field_path(run_dir, "phi", n))
        e = total_energy(grid, rho, chi, cfg.energy)
        traj.steps.append(StepResult(
            rho=rho, chi=chi, phi=phi,
            w2_squared=2.0 * cfg.h * float(ts[n]["w2sq_over_2h"]) if n < len(ts) else math.nan,
            energy=e, objective=math.nan,
            outer_iters=int(ts[n]["outer_iters"]) if n < len(ts) else 0,
            potentials=None,
        ))
    return traj
