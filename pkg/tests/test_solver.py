import math

import numpy as np
import pytest
from scipy import linalg

from vpblab import kinetic
from vpblab.kinetic import BGKOperator
from vpblab.solver import (Operators, SolverConfig, SpatialGrid, StepError, collision_step,
                           conservation_report, field_step, macro_initial, make_state,
                           poisson_residual, poisson_solve, run_scenario, step, transport_step)


@pytest.fixture(scope="module")
def sg16():
    return SpatialGrid(16)


@pytest.fixture(scope="module")
def bgk(grid12):
    return Operators(BGKOperator(grid12, 1.0))


def smooth_macro(sg, vg, amp=0.1):
    x = sg.points
    u = np.zeros(sg.shape + (3,))
    u[..., 1] = amp * np.sin(x)
    return macro_initial(sg, vg, rho=amp * np.cos(x), u=u, theta=0.5 * amp * np.sin(2 * x))


def mass(state):
    return float(np.sum(state.density()))


# ---------------------------------------------------------------------------
# grids and Poisson

def test_spatial_grid_validation():
    for n in (4, 12, 0):
        with pytest.raises(ValueError):
            SpatialGrid(n)
    with pytest.raises(ValueError):
        SpatialGrid(16, box_length=0.0)
    with pytest.raises(ValueError):
        SpatialGrid(16, dim=2)
    assert SpatialGrid(8, dim=3).shape == (8, 8, 8)


def test_poisson_single_mode():
    g = SpatialGrid(32)
    phi = poisson_solve(g, np.sin(g.points))
    assert np.max(np.abs(phi - np.sin(g.points))) < 1e-13
    L = 4.0
    g2 = SpatialGrid(32, box_length=L)
    a = np.sin(2 * np.pi * g2.points / L)
    phi2 = poisson_solve(g2, a)
    assert np.allclose(phi2, a * (L / (2 * np.pi)) ** 2, atol=1e-13)


def test_poisson_three_dimensional():
    g = SpatialGrid(8, dim=3)
    x = g.points
    a = np.sin(x)[:, None, None] * np.cos(2 * x)[None, :, None] * np.ones(8)[None, None, :]
    phi = poisson_solve(g, a)
    assert np.allclose(phi, a / 5, atol=1e-13)
    assert poisson_residual(g, phi, a) < 1e-12


def test_poisson_zero_and_mean_rejection():
    g = SpatialGrid(16)
    assert not np.any(poisson_solve(g, np.zeros(16)))
    with pytest.raises(ValueError):
        poisson_solve(g, np.ones(16))


def test_make_state_validation(sg16, grid12):
    f = np.zeros(sg16.shape + (grid12.size,))
    with pytest.raises(ValueError):
        make_state(sg16, grid12, f, 0.0)
    with pytest.raises(ValueError):
        make_state(sg16, grid12, f[:, :10], 1.0)
    charged = np.tile(grid12.sqrt_mu, (16, 1))
    with pytest.raises(ValueError):
        make_state(sg16, grid12, charged, 1.0)


# ---------------------------------------------------------------------------
# transport

def test_transport_leaves_x_constant_profile(sg16, grid12):
    rng = np.random.default_rng(0)
    g = kinetic.micro_part(rng.standard_normal(grid12.size) * grid12.sqrt_mu, grid12)
    s = make_state(sg16, grid12, np.tile(g, (16, 1)), 0.5)
    out = transport_step(s, 0.3)
    assert np.max(np.abs(out.f - s.f)) < 1e-14


def test_transport_reversible_and_norm_preserving(sg16, grid12):
    rng = np.random.default_rng(1)
    x = sg16.points
    f = np.sin(3 * x)[:, None] * rng.standard_normal(grid12.size)
    s = make_state(sg16, grid12, f, 0.7)
    fwd = transport_step(s, 0.37)
    back = transport_step(fwd, -0.37)
    assert np.max(np.abs(back.f - f)) <= 1e-12 * np.max(np.abs(f))
    F = rng.standard_normal(f.shape)
    F -= F.mean(axis=0)
    s2 = make_state(sg16, grid12, F, 1.0)
    moved = transport_step(s2, 1.3)
    n0 = np.sum(F * F, axis=0)
    n1 = np.sum(moved.f * moved.f, axis=0)
    assert np.max(np.abs(n1 - n0) / n0) <= 1e-12


def test_transport_refreshes_potential(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 1.0)
    out = transport_step(s, 0.2)
    assert poisson_residual(sg16, out.phi, out.density()) < 1e-12


# ---------------------------------------------------------------------------
# field terms

def test_field_step_without_field_is_identity(sg16, grid12):
    x = sg16.points
    u = np.zeros(sg16.shape + (3,))
    u[..., 0] = 0.1 * np.sin(x)
    s = make_state(sg16, grid12, macro_initial(sg16, grid12, u=u), 1.0)
    s.phi = np.zeros(sg16.shape)
    out = field_step(s, 0.1)
    assert np.array_equal(out.f, s.f)


def test_field_step_from_zero_f_is_the_linear_source(sg16, grid12):
    s = make_state(sg16, grid12, np.zeros(sg16.shape + (grid12.size,)), 0.5)
    s.phi = 0.01 * np.sin(sg16.points)
    dt = 0.1
    out = field_step(s, dt)
    E = s.grad_phi()
    lin = -(dt / s.eps) * (np.moveaxis(E, 0, -1) @ grid12.nodes.T) * grid12.sqrt_mu
    # the midpoint stage adds the O(dt^2 |E|^2) velocity-derivative response
    assert np.max(np.abs(out.f - lin)) <= 0.05 * np.max(np.abs(lin))
    stage = field_step(s, 1e-6)
    lin6 = lin * 1e-5
    assert np.max(np.abs(stage.f - lin6)) <= 1e-6 * np.max(np.abs(lin6))


def test_field_step_is_mass_neutral(sg16, grid12):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12, 0.2), 0.5)
    out = field_step(s, 0.05)
    brute = np.array([np.sum(out.f[i] * grid12.sqrt_mu) - np.sum(s.f[i] * grid12.sqrt_mu)
                      for i in range(16)]) * grid12.cell_volume
    total = np.sum(np.abs(s.f) @ grid12.sqrt_mu) * grid12.cell_volume
    assert np.max(np.abs(brute)) <= 1e-8 * total


# ---------------------------------------------------------------------------
# collision

def test_collision_leaves_macro_state(sg16, grid12, hs12):
    f = smooth_macro(sg16, grid12)
    s = make_state(sg16, grid12, f, 0.5)
    for ops in (Operators(hs12), Operators(BGKOperator(grid12, 2.0))):
        out = collision_step(s, ops, 0.1, nonlinear=False)
        assert np.max(np.abs(out.f - f)) <= 1e-10 * np.max(np.abs(f))


def test_strong_relaxation_bound(grid12, hs12):
    sg = SpatialGrid(8)
    rng = np.random.default_rng(2)
    F = kinetic.micro_part(rng.standard_normal((8, grid12.size)) * grid12.sqrt_mu, grid12)
    F -= F.mean(axis=0)
    s = make_state(sg, grid12, F, 1.0)
    out = collision_step(s, Operators(hs12), 1e3, nonlinear=False)
    # smallest eigenvalue of L on the micro subspace, from a dense eigendecomposition
    ev = linalg.eigvalsh(hs12.matrix)
    sigma = ev[5]
    for i in range(8):
        assert np.linalg.norm(out.f[i]) <= np.linalg.norm(F[i]) / (1 + 1e3 * sigma) * (1 + 1e-9)


def test_collision_preserves_moments(sg16, grid12, hs12):
    rng = np.random.default_rng(3)
    F = 0.1 * rng.standard_normal((16, grid12.size)) * grid12.sqrt_mu
    F -= F.mean(axis=0)
    s = make_state(sg16, grid12, F, 0.5)
    E = hs12.invariant_basis
    w = grid12.quad_weights
    m0 = (F * w) @ E.T
    for ops in (Operators(hs12), Operators(BGKOperator(grid12, 1.0))):
        out = collision_step(s, ops, 0.05, nonlinear=False)
        m1 = (out.f * w) @ E.T
        assert np.max(np.abs(m1 - m0)) <= kinetic.TOL_CONS


def test_full_collision_step_with_gamma(grid12, hs12, angular):
    sg = SpatialGrid(8)
    f = smooth_macro(sg, grid12, 0.05)
    s = make_state(sg, grid12, f, 0.5)
    ops = Operators(hs12, model=kinetic.PotentialModel(1.0), angular=angular)
    out = collision_step(s, ops, 0.01, nonlinear=True)
    assert np.all(np.isfinite(out.f))
    assert abs(mass(out) - mass(s)) <= 1e-10
    E = hs12.invariant_basis
    w = grid12.quad_weights
    assert np.max(np.abs((out.f - f) * w @ E.T)) <= 1e-8


# ---------------------------------------------------------------------------
# steps and runs

def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(dt=0.0, t_end=1.0)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, t_end=-1.0)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, t_end=1.0, scheme="rk4")
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, t_end=1.0, collision_mode="landau")
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, t_end=1.0, record_every=0)
    with pytest.raises(ValueError):
        SolverConfig(dt=0.1, t_end=1.0, substeps=("transport", "poisson"))


def test_zero_data_stays_zero(sg16, grid12, bgk):
    s = make_state(sg16, grid12, np.zeros(sg16.shape + (grid12.size,)), 0.5)
    for scheme in ("lie", "strang"):
        out = step(s, SolverConfig(dt=0.1, t_end=0.1, scheme=scheme), bgk)
        assert not np.any(out.f) and not np.any(out.phi)
        assert out.time == pytest.approx(0.1)


def test_step_keeps_poisson_consistent(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 0.5)
    out = step(s, SolverConfig(dt=0.05, t_end=0.05), bgk)
    rho = out.density()
    assert poisson_residual(sg16, out.phi, rho) <= 1e-12
    assert abs(np.mean(rho)) <= kinetic.TOL_CONS


def test_mass_drift_per_unit_time(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 0.5)
    run = run_scenario(s, SolverConfig(dt=0.02, t_end=1.0, record_every=10), bgk)
    assert conservation_report(run)["mass_drift_rate"] <= 1e-8
    assert run.max_poisson_residual <= 1e-12


def test_energy_drift_is_a_second_order_splitting_error(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 0.5)
    drift = {}
    for dt in (0.01, 0.005):
        rep = conservation_report(run_scenario(s, SolverConfig(dt=dt, t_end=1.0, record_every=20),
                                               bgk))
        drift[dt] = np.max(np.abs(rep["total_energy_drift"])) / rep["total_energy"][0]
    assert drift[0.005] <= 1e-4
    assert 3.2 <= drift[0.01] / drift[0.005] <= 4.8


@pytest.mark.parametrize("scheme,lo,hi", [("lie", 1.6, 2.4), ("strang", 3.2, 4.8)])
def test_splitting_order(sg16, grid12, bgk, scheme, lo, hi):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 0.5)

    def final(dt):
        return run_scenario(s, SolverConfig(dt=dt, t_end=0.5, scheme=scheme), bgk,
                            keep_states=True).states[-1].f

    ref = final(1 / 1024)
    e1 = np.max(np.abs(final(1 / 32) - ref))
    e2 = np.max(np.abs(final(1 / 64) - ref))
    assert lo <= e1 / e2 <= hi


def test_zero_end_time_gives_initial_record(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 1.0)
    run = run_scenario(s, SolverConfig(dt=0.1, t_end=0.0), bgk)
    assert len(run.records) == 1 and run.micro_integral == 0.0


def test_end_time_must_be_step_multiple(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 1.0)
    with pytest.raises(ValueError):
        run_scenario(s, SolverConfig(dt=0.3, t_end=1.0), bgk)


def test_record_every(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 1.0)
    run = run_scenario(s, SolverConfig(dt=0.1, t_end=1.0, record_every=3), bgk)
    assert np.allclose(run.times, [0, 0.3, 0.6, 0.9, 1.0])


def test_transport_only_run_conserves_everything(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 0.5)
    run = run_scenario(s, SolverConfig(dt=0.1, t_end=1.0, substeps=("transport",)), bgk)
    rep = conservation_report(run)
    scale = max(abs(rep["total_energy"][0]), 1e-3)
    for key in ("mass", "momentum_1", "momentum_2", "momentum_3"):
        assert np.max(np.abs(rep[key + "_drift"])) <= 1e-12
    # kinetic moments are untouched; only the field energy part moves with the density
    ke = run.series("kinetic_energy")
    assert np.max(np.abs(ke - ke[0])) <= 1e-12 * scale


def test_zero_run_ledger(sg16, grid12, bgk):
    s = make_state(sg16, grid12, np.zeros(sg16.shape + (grid12.size,)), 1.0)
    rep = conservation_report(run_scenario(s, SolverConfig(dt=0.1, t_end=0.5), bgk))
    for key, val in rep.items():
        if key != "t":
            assert not np.any(val)


def test_small_data_energy_non_increasing(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12, 0.05), 0.5)
    run = run_scenario(s, SolverConfig(dt=0.01, t_end=2.0, record_every=5), bgk)
    E = run.series("f_norm2") + run.series("field_energy")
    assert np.all(np.diff(E) <= 1e-8 * E[0])
    assert E[-1] < 0.2 * E[0]


def test_micro_integral_scales_with_eps_squared(sg16, grid12, bgk):
    f0 = smooth_macro(sg16, grid12, 0.05)
    out = {}
    for eps in (0.5, 0.25):
        s = make_state(sg16, grid12, f0, eps)
        out[eps] = run_scenario(s, SolverConfig(dt=0.25 * eps ** 2, t_end=1.0,
                                                record_every=100), bgk).micro_integral
    assert 3 <= out[0.5] / out[0.25] <= 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_data_raise_step_error(sg16, grid12, bgk):
    s = make_state(sg16, grid12, smooth_macro(sg16, grid12), 1.0)
    s.f[3, 5] = math.inf
    with pytest.raises(StepError):
        run_scenario(s, SolverConfig(dt=0.1, t_end=0.2, substeps=("collision",)), bgk)
