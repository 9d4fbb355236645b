"""Certified minimizing-movement solver for a two-phase density flow.

A density ``rho`` and a phase indicator ``chi`` evolve by implicit steps of
a Wasserstein gradient flow of the energy
``sigma P(chi) + int f(rho) + int chi (lam - rho)``.  Each step is solved
with entropic optimal transport and a phase search, and every step is
checked against a set of numeric certificates.
"""

__version__ = "0.1.0"

from .config import ConfigError, RunConfig, init_data, initial_data, parse_config
from .diagnostics import CheckOptions, TrajectoryReport, alpha_d, certify
from .energy import EnergyParams, total_energy
from .grid import Grid
from .oracle import brute_force_joint
from .stepper import FlowError, StepConfig, StepError, Trajectory, jko_step, run_flow
from .transport import EntropicParams, TransportError, sinkhorn, w2_exact_1d

__all__ = [
    "__version__", "Grid", "EnergyParams", "EntropicParams", "StepConfig", "RunConfig",
    "CheckOptions", "Trajectory", "TrajectoryReport", "ConfigError", "StepError", "FlowError",
    "TransportError", "total_energy", "sinkhorn", "w2_exact_1d", "jko_step", "run_flow",
    "certify", "alpha_d", "brute_force_joint", "parse_config", "init_data", "initial_data",
]
