"""Run configuration: a strict ``key=value`` format and initial-data presets."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .diagnostics import CheckOptions
from .energy import EnergyParams
from .grid import Grid, check_phase
from .stepper import StepConfig
from .transport import EntropicParams


class ConfigError(ValueError):
    """Malformed or out-of-range configuration; ``line`` is 1-based or ``None``."""

    def __init__(self, msg, line=None):
        super().__init__(msg if line is None else f"line {line}: {msg}")
        self.line = line


def _floats(text):
    return tuple(float(t) for t in text.split(","))


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


# key, attribute, parser, default, help
_KEY_TABLE = [
    ("dim", "dim", int, 1, "number of space dimensions (1-3)"),
    ("cells", "cells", int, 256, "cells per axis"),
    ("domain_lo", "domain_lo", float, 0.0, "lower end of every axis"),
    ("domain_hi", "domain_hi", float, 1.0, "upper end of every axis"),
    ("h", "h", float, 1e-3, "time step"),
    ("T", "T", float, 0.2, "final time; floor(T/h) steps are taken"),
    ("m", "m", float, 1.0, "free-energy exponent, >= 1"),
    ("lambda", "lam", float, 1.0, "phase-transition constant, > 0"),
    ("sigma", "sigma", float, 1.0, "perimeter weight, >= 0"),
    ("c_omega", "c_omega", _opt_float, None, "energy constant; none = |box|/e + 1 for m=1, 1 otherwise"),
    ("eps0", "eps0", _opt_float, None, "initial regularization; none = (side)^2/16"),
    ("eps_min", "eps_min", _opt_float, None, "final regularization; none = 4 dx^2"),
    ("decay", "decay", float, 0.7, "regularization decay factor in (0, 1)"),
    ("max_sweeps", "max_sweeps", int, 20000, "scaling sweep budget per solve"),
    ("tol_marginal", "tol_marginal", float, 1e-9, "l1 marginal tolerance"),
    ("relax", "relax", float, 1.8, "over-relaxation factor of the standalone solver, in [1, 2)"),
    ("outer_max", "outer_max", int, 50, "outer iterations per step"),
    ("outer_tol", "outer_tol", _opt_float, None, "objective-decrease stop; none = 1e-9 (1 + E0)"),
    ("newton_tol", "newton_tol", float, 1e-12, "Newton tolerance of the proximal map"),
    ("pd_max", "pd_max", int, 200000, "primal-dual iteration budget (2D/3D phase)"),
    ("pd_tol", "pd_tol", float, 1e-7, "primal-dual gap tolerance"),
    ("debias", "debias", _bool, True, "self-transport correction in the density solve"),
    ("envelope", "envelope", _bool, True, "extra phase proposals when alternation stalls"),
    ("rho_preset", "rho_preset", str, "gaussian", "uniform | gaussian | two-bump"),
    ("rho_center", "rho_center", _floats, (0.5,), "gaussian center (one value or one per axis)"),
    ("rho_width", "rho_width", float, 0.1, "gaussian / bump standard deviation"),
    ("rho_c1", "rho_c1", _floats, (0.3,), "two-bump first center"),
    ("rho_c2", "rho_c2", _floats, (0.7,), "two-bump second center"),
    ("chi_preset", "chi_preset", str, "interval", "empty | full | interval | disk | random"),
    ("chi_a", "chi_a", float, 0.4, "interval start (axis 0)"),
    ("chi_b", "chi_b", float, 0.6, "interval end (axis 0)"),
    ("chi_center", "chi_center", _floats, (0.5,), "disk center"),
    ("chi_radius", "chi_radius", float, 0.2, "disk radius"),
    ("chi_p", "chi_p", float, 0.5, "random phase: probability of 1"),
    ("seed", "seed", int, 0, "seed for random presets and competitors"),
    ("check_dissipation", "check_dissipation", _bool, True, "per-step energy inequality"),
    ("check_optimality", "check_optimality", _bool, True, "first-order conditions of the density"),
    ("check_almost_minimizing", "check_almost_minimizing", _bool, True, "phase competitor inequality"),
    ("competitors", "competitors", int, 20, "random competitors per step"),
    ("check_holder", "check_holder", _bool, True, "Holder-in-time bound over sampled pairs"),
    ("holder_times", "holder_times", int, 20, "sampled times for the Holder bound"),
    ("degiorgi_steps", "degiorgi_steps", int, 5, "steps checked with the variational interpolation"),
    ("check_optimal_dissipation", "check_optimal_dissipation", _bool, True,
     "dissipation relation tested with vector fields"),
    ("report_jump", "report_jump", _bool, True, "interface jump residual series"),
    ("report_euler_lagrange", "report_euler_lagrange", _bool, True, "first-variation residual series"),
    ("report_stability", "report_stability", _bool, True, "phase stability ratio series"),
    ("report_muckenhoupt", "report_muckenhoupt", _bool, True, "A1 constant series"),
    ("checkpoint_every", "checkpoint_every", int, 1, "field dump interval in steps"),
    ("output_dir", "output_dir", str, "verigin-run", "output directory"),
]

KEYS = {k: (attr, parse, default, doc) for k, attr, parse, default, doc in _KEY_TABLE}


@dataclass(frozen=True)
class RunConfig:
    dim: int = 1
    cells: int = 256
    domain_lo: float = 0.0
    domain_hi: float = 1.0
    h: float = 1e-3
    T: float = 0.2
    m: float = 1.0
    lam: float = 1.0
    sigma: float = 1.0
    c_omega: float | None = None
    eps0: float | None = None
    eps_min: float | None = None
    decay: float = 0.7
    max_sweeps: int = 20000
    tol_marginal: float = 1e-9
    relax: float = 1.8
    outer_max: int = 50
    outer_tol: float | None = None
    newton_tol: float = 1e-12
    pd_max: int = 200000
    pd_tol: float = 1e-7
    debias: bool = True
    envelope: bool = True
    rho_preset: str = "gaussian"
    rho_center: tuple = (0.5,)
    rho_width: float = 0.1
    rho_c1: tuple = (0.3,)
    rho_c2: tuple = (0.7,)
    chi_preset: str = "interval"
    chi_a: float = 0.4
    chi_b: float = 0.6
    chi_center: tuple = (0.5,)
    chi_radius: float = 0.2
    chi_p: float = 0.5
    seed: int = 0
    check_dissipation: bool = True
    check_optimality: bool = True
    check_almost_minimizing: bool = True
    competitors: int = 20
    check_holder: bool = True
    holder_times: int = 20
    degiorgi_steps: int = 5
    check_optimal_dissipation: bool = True
    report_jump: bool = True
    report_euler_lagrange: bool = True
    report_stability: bool = True
    report_muckenhoupt: bool = True
    checkpoint_every: int = 1
    output_dir: str = "verigin-run"

    # -- derived objects; constructing them validates the ranges

    def grid(self):
        return Grid.uniform(self.dim, self.cells, self.domain_lo, self.domain_hi)

    def step_config(self):
        return StepConfig(
            h=self.h,
            energy=EnergyParams(m=self.m, lam=self.lam, c_omega=self.c_omega, sigma=self.sigma),
            entropic=EntropicParams(eps0=self.eps0, eps_min=self.eps_min, decay=self.decay,
                                    max_sweeps=self.max_sweeps, tol_marginal=self.tol_marginal,
                                    relax=self.relax),
            outer_max=self.outer_max, outer_tol=self.outer_tol, newton_tol=self.newton_tol,
            pd_max=self.pd_max, pd_tol=self.pd_tol, debias=self.debias, envelope=self.envelope,
        )

    def check_options(self):
        return CheckOptions(
            dissipation=self.check_dissipation, optimality=self.check_optimality,
            almost_minimizing=self.check_almost_minimizing, competitors=self.competitors,
            seed=self.seed, holder=self.check_holder, holder_times=self.holder_times,
            degiorgi_steps=self.degiorgi_steps, optimal_dissipation=self.check_optimal_dissipation,
            jump=self.report_jump, euler_lagrange=self.report_euler_lagrange,
            stability=self.report_stability, muckenhoupt=self.report_muckenhoupt,
        )

    def validate(self):
        """Raise :class:`ConfigError` on any out-of-range value."""
        try:
            self.grid()
            self.step_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not (math.isfinite(self.T) and self.T >= 0):
            raise ConfigError(f"T must be >= 0, got {self.T}")
        if self.rho_width <= 0 or self.chi_radius < 0 or not 0 <= self.chi_p <= 1:
            raise ConfigError("rho_width must be > 0, chi_radius >= 0 and chi_p in [0, 1]")
        for name in ("competitors", "holder_times", "degiorgi_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        for name in ("rho_center", "rho_c1", "rho_c2", "chi_center"):
            _per_axis(getattr(self, name), self.dim, name)
        if self.rho_preset not in RHO_PRESETS:
            raise ConfigError(f"unknown density preset {self.rho_preset!r}")
        if self.chi_preset not in CHI_PRESETS:
            raise ConfigError(f"unknown phase preset {self.chi_preset!r}")
        return self


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


def dumps(cfg):
    """Every key with its value, in a form :func:`loads` reads back exactly."""
    return "".join(f"{k}={_format(getattr(cfg, attr))}\n" for k, (attr, *_) in KEYS.items())


def print_defaults():
    """Documented defaults, one ``key=value`` line each preceded by its help text."""
    lines = []
    for k, (attr, _, default, doc) in KEYS.items():
        lines.append(f"# {doc}")
        lines.append(f"{k}={_format(default)}")
    return "\n".join(lines) + "\n"


def loads(text):
    """Parse ``key=value`` lines; ``#`` starts a comment.

    Raises
    ------
    ConfigError
        On a malformed line, an unknown or repeated key, an unparsable value
        or an out-of-range value.  Line numbers are reported when known.
    """
    values = {}
    lines = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", no)
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", no)
        if key in lines:
            raise ConfigError(f"key {key!r} repeated (first on line {lines[key]})", no)
        attr, parse, _, _ = KEYS[key]
        try:
            values[attr] = parse(val)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}", no) from None
        lines[key] = no
    try:
        return RunConfig(**values).validate()
    except ConfigError as exc:
        # blame the first line, in file order, whose value makes validation fail
        partial = {}
        for key, no in sorted(lines.items(), key=lambda kv: kv[1]):
            attr = KEYS[key][0]
            partial[attr] = values[attr]
            try:
                RunConfig(**partial).validate()
            except ConfigError as inner:
                if str(inner) == str(exc):
                    raise ConfigError(str(exc), no) from None
        raise


def parse_config(path):
    """Read a configuration file; see :func:`loads`."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return loads(text)


# ---------------------------------------------------------------------------
# initial data


def _per_axis(values, dim, name):
    if len(values) == 1:
        return values * dim
    if len(values) != dim:
        raise ConfigError(f"{name} needs 1 or {dim} values, got {len(values)}")
    return tuple(values)


def _normalize(grid, rho):
    mass = float(np.sum(rho)) * grid.cell_volume
    if not mass > 0:
        raise ConfigError("initial density has no mass on the grid")
    return rho / mass


def _gaussian(grid, center, width):
    r2 = sum((x - c) ** 2 for x, c in zip(grid.mesh, center))
    return np.exp(-r2 / (2.0 * width * width))


RHO_PRESETS = ("uniform", "gaussian", "two-bump")
CHI_PRESETS = ("empty", "full", "interval", "disk", "random")


def init_density(preset, cfg, grid):
    if preset == "uniform":
        rho = np.ones(grid.shape)
    elif preset == "gaussian":
        rho = _gaussian(grid, _per_axis(cfg.rho_center, grid.dim, "rho_center"), cfg.rho_width)
    elif preset == "two-bump":
        rho = (_gaussian(grid, _per_axis(cfg.rho_c1, grid.dim, "rho_c1"), cfg.rho_width)
               + _gaussian(grid, _per_axis(cfg.rho_c2, grid.dim, "rho_c2"), cfg.rho_width))
    else:
        raise ConfigError(f"unknown density preset {preset!r}")
    return _normalize(grid, rho)


def init_phase(preset, cfg, grid):
    if preset == "empty":
        chi = np.zeros(grid.shape)
    elif preset == "full":
        chi = np.ones(grid.shape)
    elif preset == "interval":
        x = grid.mesh[0]
        chi = (x > cfg.chi_a) & (x < cfg.chi_b)
    elif preset == "disk":
        c = _per_axis(cfg.chi_center, grid.dim, "chi_center")
        chi = sum((x - ci) ** 2 for x, ci in zip(grid.mesh, c)) < cfg.chi_radius ** 2
    elif preset == "random":
        chi = np.random.default_rng(cfg.seed).random(grid.shape) < cfg.chi_p
    else:
        raise ConfigError(f"unknown phase preset {preset!r}")
    return check_phase(grid, np.asarray(chi, dtype=np.int8))


def init_data(preset, params=None, grid=None):
    """Initial pair ``(rho0, chi0)``.

    Parameters
    ----------
    preset : tuple of str
        ``(density preset, phase preset)``, names from :data:`RHO_PRESETS`
        and :data:`CHI_PRESETS`.
    params : RunConfig or mapping, optional
        Preset parameters (``rho_center``, ``chi_a``, ...).  A mapping
        overrides the defaults of :class:`RunConfig`.
    grid : Grid, optional
        Defaults to the grid of ``params``.

    Returns
    -------
    rho0 : ndarray
        Density with unit mass on the grid.
    chi0 : ndarray of int8
    """
    if params is None:
        params = RunConfig()
    elif not isinstance(params, RunConfig):
        params = RunConfig(**dict(params))
    grid = params.grid() if grid is None else grid
    rho_name, chi_name = preset
    return init_density(rho_name, params, grid), init_phase(chi_name, params, grid)


def initial_data(cfg):
    """:func:`init_data` with the presets named in ``cfg``."""
    return init_data((cfg.rho_preset, cfg.chi_preset), cfg)


def with_overrides(cfg, **kw):
    """Copy of ``cfg`` with attributes replaced, validated."""
    return replace(cfg, **kw).validate()


def field_names():
    return [f.name for f in fields(RunConfig)]
