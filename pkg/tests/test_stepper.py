import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from verigin.energy import EnergyParams, f, total_energy
from verigin.grid import Grid, integrate
from verigin.oracle import all_phases
from verigin.stepper import (
    FlowError, StepConfig, StepError, boundary_moves, degiorgi_interpolate, f_conjugate,
    jko_step, mass_matched_prox, n_steps_for, phase_energy, prox_log_m1, prox_log_newton,
    run_flow, solve_density, solve_phase, solve_phase_costs,
)
from verigin.transport import EntropicParams, w2_exact_1d

from conftest import gaussian_1d, interval_phase, unit_mass

G128 = Grid.uniform(1, 128)


def resolved(cfg, grid, rho, chi):
    return cfg.resolved(grid, total_energy(grid, rho, chi, cfg.energy).total)


def test_step_config_validation():
    for kw in ({"h": 0.0}, {"h": -1.0}, {"h": 1.0, "outer_max": 0}, {"h": 1.0, "outer_tol": 0.0},
               {"h": 1.0, "pd_max": 0}, {"h": 1.0, "newton_tol": -1.0}):
        with pytest.raises(ValueError):
            StepConfig(**kw)
    cfg = StepConfig(h=1e-3).resolved(G128, 2.0)
    assert cfg.outer_tol == pytest.approx(3e-9)
    assert cfg.energy.c_omega == pytest.approx(1 / math.e + 1)


def test_n_steps_for():
    assert n_steps_for(0.5e-3, 1e-3) == 0
    assert n_steps_for(0.2, 1e-3) == 200
    assert n_steps_for(3e-2, 1e-2) == 3


# -- proximal maps


@given(st.floats(-20, 5), st.sampled_from([0.0, 1.0]), st.floats(1e-4, 1e4))
def test_prox_m1_first_order_condition(lq, chi, eps_p):
    t = prox_log_m1(lq, chi, eps_p)
    assert t + 1 - chi + eps_p * (t - lq) == pytest.approx(0.0, abs=1e-9 * (1 + eps_p * abs(lq)))


@given(st.floats(-20, 5), st.sampled_from([0.0, 1.0]), st.floats(1e-4, 1e4),
       st.sampled_from([1.5, 2.0, 3.0]))
def test_prox_newton_first_order_condition(lq, chi, eps_p, m):
    t = float(prox_log_newton(np.array([lq]), np.array([chi]), eps_p, m)[0])
    g = m / (m - 1) * math.exp((m - 1) * t) - chi + eps_p * (t - lq)
    assert abs(g) <= 1e-9 * (1 + abs(chi) + eps_p * abs(lq) + m / (m - 1) * math.exp((m - 1) * t))


def test_prox_newton_nonconvergence_raises():
    with pytest.raises(StepError):
        prox_log_newton(np.linspace(-5, 5, 7), np.zeros(7), 1e-3, 2.0, max_iter=1)


@pytest.mark.parametrize("m", [1.0, 2.0])
def test_mass_matched_prox_hits_target(m):
    rng = np.random.default_rng(0)
    lq = rng.normal(size=(3, 20))
    chi = (rng.random((3, 20)) < 0.5).astype(float)
    dv = 0.05
    shift, t = mass_matched_prox(lq, chi, 1e-3, m, dv, 0.0, (-1,))
    assert np.allclose(np.sum(np.exp(t), axis=-1) * dv, 1.0, rtol=1e-12)
    assert shift.shape == (3, 1)


@given(st.floats(-3, 3), st.sampled_from([1.0, 2.0, 3.0]))
def test_f_conjugate_is_fenchel(y, m):
    s = np.concatenate(([0.0], np.exp(np.linspace(-12, 4, 20001))))
    sup = float(np.max(s * y - f(s, m)))
    assert float(f_conjugate(y, m)) == pytest.approx(sup, rel=1e-5, abs=1e-6)


# -- density subproblem


def test_large_h_gives_uniform():
    rho_prev = gaussian_1d(G128, 0.3, 0.1)
    cfg = resolved(StepConfig(h=1e3, entropic=EntropicParams(eps_min=1e-4)), G128, rho_prev,
                   np.zeros(128))
    sol = solve_density(G128, rho_prev, np.zeros(128, np.int8), cfg)
    assert np.max(np.abs(sol.rho - 1.0)) <= 1e-3


@pytest.mark.parametrize("h", [1e-4, 1e-3])
def test_small_h_competitor_bound(h):
    rho_prev = gaussian_1d(G128, 0.5, 0.1)
    chi = interval_phase(G128, 0.4, 0.6)
    cfg = resolved(StepConfig(h=h), G128, rho_prev, chi)
    sol = solve_density(G128, rho_prev, chi, cfg)
    # energy is nonnegative, so E_min >= 0
    e_prev = total_energy(G128, rho_prev, chi, cfg.energy).total
    assert w2_exact_1d(G128, sol.rho, rho_prev) <= 2 * h * e_prev


def test_density_optimality_residual():
    rho_prev = gaussian_1d(G128, 0.5, 0.1)
    chi = interval_phase(G128, 0.4, 0.6)
    cfg = resolved(StepConfig(h=1e-3, entropic=EntropicParams(eps_min=1e-4)), G128, rho_prev, chi)
    sol = solve_density(G128, rho_prev, chi, cfg)
    base = np.log(sol.rho) + 1 - chi
    r = base + sol.phi
    w = sol.rho / sol.rho.sum()
    std = math.sqrt(np.sum(w * (r - np.sum(w * r)) ** 2))
    assert std <= 1e-2 * np.ptp(base)
    assert abs(integrate(G128, sol.rho) - 1) <= 1e-12 and np.all(sol.rho > 0)


def test_density_batch_matches_single():
    rho_prev = gaussian_1d(G128, 0.5, 0.1)
    chis = np.stack([interval_phase(G128, 0.4, 0.6), np.zeros(128, np.int8)])
    cfg = resolved(StepConfig(h=1e-3), G128, rho_prev, chis[0])
    batch = solve_density(G128, rho_prev, chis, cfg)
    for k in range(2):
        single = solve_density(G128, rho_prev, chis[k], cfg)
        assert float(batch.objective[k]) == pytest.approx(float(single.objective), rel=1e-9)


def test_density_m2_log_domain_matches_dense(monkeypatch):
    import verigin.stepper as stepper
    g = Grid.uniform(1, 48)
    rho_prev = gaussian_1d(g, 0.5, 0.15)
    chi = interval_phase(g, 0.3, 0.5)
    cfg = resolved(StepConfig(h=1e-2, energy=EnergyParams(m=2, lam=0.5)), g, rho_prev, chi)
    dense = solve_density(g, rho_prev, chi, cfg)
    monkeypatch.setattr(stepper, "DENSE_MAX_CELLS", 0)
    logd = solve_density(g, rho_prev, chi, cfg)
    assert float(logd.objective) == pytest.approx(float(dense.objective), rel=1e-8)
    assert np.allclose(logd.rho, dense.rho, rtol=1e-6, atol=1e-9)


def test_density_rejects_bad_mass():
    cfg = StepConfig(h=1e-3).resolved(G128, 1.0)
    with pytest.raises(ValueError):
        solve_density(G128, 2 * np.ones(128), np.zeros(128, np.int8), cfg)


# -- phase subproblem


def enumerated_phase(grid, rho, params):
    chis = all_phases(grid.size)
    vals = phase_energy(grid, rho, chis, params)
    return chis[int(np.argmin(vals))]


def test_solve_phase_degenerate_tie():
    g = Grid.uniform(1, 10)
    cfg = StepConfig(h=1.0, energy=EnergyParams(m=1, lam=1))
    assert not solve_phase(g, np.ones(10), cfg).any()
    assert phase_energy(g, np.ones(10), np.zeros(10), cfg.energy) == 0.0


@pytest.mark.parametrize("height", [5.0, 30.0])
def test_solve_phase_unit_background_takes_whole_box(height):
    # rho >= lam everywhere: the full box has no interior boundary and wins
    g = Grid.uniform(1, 10)
    cfg = StepConfig(h=1.0, energy=EnergyParams(m=1, lam=1))
    rho = 1 + height * interval_phase(g, 0.4, 0.6)
    chi = solve_phase(g, rho, cfg)
    assert np.array_equal(chi, enumerated_phase(g, rho, cfg.energy))
    assert chi.all()


@pytest.mark.parametrize("height,expect_bump", [(10.0, False), (30.0, True)])
def test_solve_phase_bump_gain_against_perimeter(height, expect_bump):
    # background below lam, so neither the full box nor a partial cover pays off
    g = Grid.uniform(1, 10)
    cfg = StepConfig(h=1.0, energy=EnergyParams(m=1, lam=5))
    bump = interval_phase(g, 0.4, 0.6)
    rho = 0.5 + height * bump
    chi = solve_phase(g, rho, cfg)
    assert np.array_equal(chi, enumerated_phase(g, rho, cfg.energy))
    assert np.array_equal(chi, bump if expect_bump else np.zeros(10, np.int8))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 2.0))
def test_phase_dp_is_global_1d(seed, sigma):
    g = Grid.uniform(1, 9)
    c = np.random.default_rng(seed).normal(scale=0.5, size=9)
    cfg = StepConfig(h=1.0, energy=EnergyParams(sigma=sigma))
    chi = solve_phase_costs(g, c, cfg)
    chis = all_phases(9)
    best = np.min(sigma * np.count_nonzero(np.diff(chis, axis=1), axis=1) + chis @ c)
    val = sigma * np.count_nonzero(np.diff(chi)) + chi @ c
    assert val <= best + 1e-12


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_phase_pd_threshold_is_global_2d(seed):
    g = Grid.uniform(2, 3)
    c = np.random.default_rng(seed).normal(scale=0.3, size=(3, 3))
    cfg = StepConfig(h=1.0, energy=EnergyParams(sigma=1.0), pd_tol=1e-10)
    stats = {}
    chi = solve_phase_costs(g, c, cfg, stats)
    area = g.face_area(0)

    def value(x):
        return area * (np.count_nonzero(np.diff(x, axis=0)) + np.count_nonzero(np.diff(x, axis=1))) \
            + float(np.sum(c * x))

    best = min(value(np.array(bits).reshape(3, 3)) for bits in itertools.product((0, 1), repeat=9))
    assert value(chi) <= best + 1e-9
    assert stats["threshold_energy"][0] <= stats["relaxed_energy"][0] + cfg.pd_tol


def test_phase_pd_nonconvergence_raises():
    g = Grid.uniform(2, 8)
    cfg = StepConfig(h=1.0, pd_max=1, pd_tol=1e-12)
    with pytest.raises(StepError):
        solve_phase_costs(g, np.random.default_rng(0).normal(size=(8, 8)), cfg)


def test_boundary_moves_are_distinct_neighbours():
    g = Grid.uniform(1, 12)
    chi = interval_phase(g, 0.3, 0.7)
    moves = boundary_moves(g, chi)
    assert len(moves) > 0
    for mv in moves:
        assert set(np.unique(mv)) <= {0, 1} and not np.array_equal(mv, chi)


# -- one step and the flow


def test_fixed_point_single_outer_iteration():
    g = Grid.uniform(1, 32)
    rho = np.ones(32)
    cfg = resolved(StepConfig(h=1e-2, energy=EnergyParams(m=1, lam=5.0)), g, rho, np.zeros(32))
    step = jko_step(g, rho, np.zeros(32, np.int8), cfg)
    assert step.outer_iters == 1
    assert not step.chi.any()
    assert np.max(np.abs(step.rho - 1.0)) <= 1e-6


def test_objective_nonincreasing_over_outer_iterations():
    g = Grid.uniform(1, 64)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        rho = unit_mass(g, rng.uniform(0.05, 1.0, 64) ** 2 * 4)
        chi = (rng.random(64) < 0.5).astype(np.int8)
        cfg = resolved(StepConfig(h=1e-2, energy=EnergyParams(m=1, lam=1, sigma=0.05)), g, rho, chi)
        step = jko_step(g, rho, chi, cfg)
        obj = step.stats["objective"]
        assert all(b <= a + 1e-8 * (1 + abs(a)) for a, b in zip(obj, obj[1:])), seed


def test_step_invariants():
    rho0 = gaussian_1d(G128)
    chi0 = interval_phase(G128, 0.4, 0.6)
    traj = run_flow(G128, rho0, chi0, 5e-3, StepConfig(h=1e-3, energy=EnergyParams(sigma=0.05)))
    assert len(traj) == 5
    energies = [traj.energy(n).total for n in range(6)]
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    for s in traj.steps:
        assert abs(integrate(G128, s.rho) - 1) <= 1e-10
        assert np.all(s.rho > 0)
        assert set(np.unique(s.chi)) <= {0, 1}
    # total dissipation: sum W2^2 / 2h <= E0 - E_N
    diss = sum(w2_exact_1d(G128, traj.rho(n), traj.rho(n - 1)) / 2e-3 for n in range(1, 6))
    assert diss <= energies[0] - energies[-1] + 1e-8


def test_run_flow_zero_steps_and_index():
    rho0 = gaussian_1d(G128)
    traj = run_flow(G128, rho0, np.zeros(128, np.int8), 0.5e-3, StepConfig(h=1e-3))
    assert len(traj) == 0 and traj.rho(0) is not None
    assert traj.index_at(0.7e-3) == 0


def test_run_flow_is_deterministic():
    rho0 = gaussian_1d(G128)
    chi0 = interval_phase(G128, 0.4, 0.6)
    cfg = StepConfig(h=1e-3, energy=EnergyParams(sigma=0.05))
    a = run_flow(G128, rho0, chi0, 3e-3, cfg)
    b = run_flow(G128, rho0, chi0, 3e-3, cfg)
    for n in range(1, 4):
        assert np.array_equal(a.rho(n), b.rho(n)) and np.array_equal(a.chi(n), b.chi(n))


def test_run_flow_failure_keeps_partial_trajectory():
    g = Grid.uniform(2, 8)
    X, Y = g.mesh
    rho0 = unit_mass(g, np.exp(-((X - 0.5) ** 2 + (Y - 0.5) ** 2) / 0.02))
    chi0 = np.zeros(g.shape, np.int8)
    chi0[2:6, 2:6] = 1
    cfg = StepConfig(h=1e-2, pd_max=1, pd_tol=1e-14)
    with pytest.raises(FlowError) as info:
        run_flow(g, rho0, chi0, 3e-2, cfg)
    assert len(info.value.trajectory) == 0


def test_degiorgi_examples():
    rho0 = gaussian_1d(G128)
    chi0 = interval_phase(G128, 0.4, 0.6)
    cfg = resolved(StepConfig(h=1e-3), G128, rho0, chi0)
    step = jko_step(G128, rho0, chi0, cfg)
    at_h = degiorgi_interpolate(G128, rho0, chi0, cfg.h, cfg)
    e0 = total_energy(G128, rho0, chi0, cfg.energy).total
    assert at_h.objective == pytest.approx(step.objective, abs=1e-8 * (1 + e0))
    t = cfg.h / 100
    small = degiorgi_interpolate(G128, rho0, chi0, t, cfg)
    assert w2_exact_1d(G128, small.rho, rho0) <= 2 * t * e0
    ts = np.linspace(0.2, 1.0, 5) * cfg.h
    vals = [degiorgi_interpolate(G128, rho0, chi0, t, cfg).objective for t in ts]
    assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
