"""Command-line entry point ``verigin``.

Exit codes: 0 when every enabled certificate passes, 2 when a certificate
fails, 1 on configuration, input or solver errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from . import io as vio
from .config import ConfigError, dumps, initial_data, parse_config, print_defaults
from .diagnostics import certify, step_w2
from .energy import total_energy
from .oracle import EnumerationBudget, brute_force_joint
from .stepper import FlowError, StepError, jko_step, n_steps_for, run_flow
from .transport import TransportError

EXIT_OK, EXIT_ERROR, EXIT_CERT = 0, 1, 2
THREADS_ENV = "VERIGIN_THREADS"


def versions():
    return {"verigin": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def thread_limit():
    """BLAS thread cap from ``VERIGIN_THREADS``; 0 (the default) means serial.

    Raises
    ------
    ConfigError
        If the variable is set to anything but a nonnegative integer.
    """
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = -1
    if n < 0:
        raise ConfigError(f"{THREADS_ENV} must be a nonnegative integer, got {raw!r}")
    return max(n, 1)


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _summary_rows(traj, w2, report=None):
    ok = {s.step: s.passed for s in report.steps} if report is not None else {}
    return [(n, traj.energy(n).total, 0.0 if n == 0 else w2[n - 1] / (2 * traj.h),
             0 if n == 0 else traj.steps[n - 1].outer_iters, ok.get(n))
            for n in range(len(traj) + 1)]


def corrupt_energy(traj, n):
    """Fault injection: raise the stored energy of step ``n`` by one."""
    step = traj.steps[n - 1]
    step.energy = dataclasses.replace(step.energy, c_omega=step.energy.c_omega + 1.0)


def cmd_run(args):
    cfg = parse_config(args.config)
    if args.output:
        cfg = dataclasses.replace(cfg, output_dir=args.output)
    n_steps = n_steps_for(cfg.T, cfg.h)
    if args.corrupt_step is not None and not 1 <= args.corrupt_step <= n_steps:
        raise ConfigError(f"--corrupt-step must lie in [1, {n_steps}]")
    out = Path(cfg.output_dir)
    grid = cfg.grid()
    rho0, chi0 = initial_data(cfg)
    echo = dumps(cfg)
    vio.atomic_write(out / vio.CONFIG_FILE, echo)
    extra = {"steps_planned": n_steps}
    if args.corrupt_step is not None:
        extra["corrupt_step"] = args.corrupt_step
    t0 = time.perf_counter()

    def progress(n, step):
        if args.verbose:
            _log(args, f"step {n}/{n_steps} energy={step.energy.total:.12g} "
                       f"outer={step.outer_iters}")

    try:
        traj = run_flow(grid, rho0, chi0, cfg.T, cfg.step_config(), callback=progress)
    except FlowError as exc:
        traj = exc.trajectory
        w2 = step_w2(traj)
        vio.write_fields(out, traj, cfg.checkpoint_every)
        vio.write_timeseries(out, traj, w2)
        vio.write_manifest(out, vio.manifest_text(
            echo, versions(), time.perf_counter() - t0, _summary_rows(traj, w2),
            partial=True, error=str(exc), extra=extra))
        _log(args, f"solver error: {exc}")
        return EXIT_ERROR
    if args.corrupt_step is not None:
        corrupt_energy(traj, args.corrupt_step)
    report = certify(traj, cfg.check_options())
    vio.write_fields(out, traj, cfg.checkpoint_every)
    vio.write_timeseries(out, traj, report.w2)
    vio.write_report(out, report)
    passed, total = report.counts()
    vio.write_manifest(out, vio.manifest_text(
        echo, versions(), time.perf_counter() - t0, _summary_rows(traj, report.w2, report),
        counts=(passed, total), extra=extra))
    _log(args, f"{len(traj)} steps, certificates passed {passed}/{total}, output in {out}")
    for c in report.failures():
        _log(args, f"FAIL {c.name} step {c.step}: slack {c.slack:.3e} < -{c.tol:.3e}")
    return EXIT_OK if report.passed else EXIT_CERT


def cmd_check(args):
    run_dir = Path(args.run_dir)
    cfg = parse_config(run_dir / vio.CONFIG_FILE)
    grid = cfg.grid()
    try:
        traj = vio.load_trajectory(run_dir, grid, cfg.step_config())
    except FileNotFoundError as exc:
        raise ConfigError(f"cannot recheck {run_dir}: {exc} "
                          "(rechecking needs checkpoint_every=1)") from None
    report = certify(traj, cfg.check_options())
    passed, total = report.counts()
    _log(args, f"{len(traj)} steps reloaded, certificates passed {passed}/{total}")
    reproduced = True
    stored = {}
    for name in (vio.CERTIFICATES_FILE, vio.TRAJECTORY_CHECKS_FILE):
        path = run_dir / name
        stored[name] = path.read_text(encoding="utf-8") if path.exists() else None
    per_step = [c for s in report.steps for c in s.checks]
    fresh = {vio.CERTIFICATES_FILE: vio._csv_text(vio.CHECK_HEADER, vio.check_rows(per_step)),
             vio.TRAJECTORY_CHECKS_FILE: vio._csv_text(vio.CHECK_HEADER,
                                                       vio.check_rows(report.trajectory))}
    for name, text in fresh.items():
        if stored[name] is not None and stored[name] != text:
            reproduced = False
            _log(args, f"{name}: recomputed certificates differ from the stored file")
    for c in report.failures():
        _log(args, f"FAIL {c.name} step {c.step}: slack {c.slack:.3e} < -{c.tol:.3e}")
    return EXIT_OK if report.passed and reproduced else EXIT_CERT


def cmd_oracle(args):
    cfg = parse_config(args.config)
    grid = cfg.grid()
    budget = EnumerationBudget()
    if grid.dim != 1 or grid.size > budget.max_cells:
        raise ConfigError(f"oracle needs a 1D grid with at most {budget.max_cells} cells")
    rho_prev, chi_prev = initial_data(cfg)
    step_cfg = cfg.step_config()
    e0 = total_energy(grid, rho_prev, chi_prev, step_cfg.energy)
    step_cfg = step_cfg.resolved(grid, e0.total)
    step = jko_step(grid, rho_prev, chi_prev, step_cfg)
    best = brute_force_joint(grid, rho_prev, step_cfg, budget)
    tol = 1e-8 * (1.0 + abs(best.objective))
    ok = step.objective <= best.objective + tol
    print(f"alternating objective: {step.objective!r}")
    print(f"global objective:      {best.objective!r}")
    print(f"alternating phase: {''.join(str(int(v)) for v in step.chi)}")
    print(f"global phase:      {''.join(str(int(v)) for v in best.chi)}")
    print(f"gap: {step.objective - best.objective:.3e} (tolerance {tol:.3e}) "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CERT


def build_parser():
    p = argparse.ArgumentParser(prog="verigin", description=(
        "Certified minimizing-movement solver for a two-phase density flow."))
    p.add_argument("--print-defaults", action="store_true",
                   help="print every configuration key with its default and exit")
    p.add_argument("--version", action="version", version=f"verigin {__version__}")
    sub = p.add_subparsers(dest="command")
    r = sub.add_parser("run", help="run a flow, certify it and write the outputs")
    r.add_argument("config")
    r.add_argument("--output", help="output directory (overrides output_dir)")
    r.add_argument("--corrupt-step", type=int, metavar="N",
                   help="add 1 to the energy of step N before certifying (negative control)")
    c = sub.add_parser("check", help="reload a run directory and rerun its certificates")
    c.add_argument("run_dir")
    o = sub.add_parser("oracle", help="compare one step against brute-force enumeration")
    o.add_argument("config")
    for s in (r, c, o):
        s.add_argument("-q", "--quiet", action="store_true")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


COMMANDS = {"run": cmd_run, "check": cmd_check, "oracle": cmd_oracle}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        sys.stdout.write(print_defaults())
        return EXIT_OK
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_ERROR
    try:
        with threadpool_limits(limits=thread_limit()):
            return COMMANDS[args.command](args)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"verigin: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (StepError, TransportError, FloatingPointError) as exc:
        print(f"verigin: solver error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
