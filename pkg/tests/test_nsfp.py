import math

import numpy as np
import pytest

from vpblab import kinetic
from vpblab.kinetic import BGKOperator
from vpblab.nsfp import (TransportCoefficients, compute_transport_coefficients,
                         constraint_residual, divergence, fluid_state, kinetic_energy,
                         leray_project, nsfp_run, nsfp_step, recover_rho_theta,
                         shear_decay_factor)
from vpblab.solver import SpatialGrid


def gaussian_moment_coefficients():
    """<A:A>_mu / 10 and (2/15) <B.B>_mu by 1-d Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(20)
    w = w / w.sum()
    V = np.array(np.meshgrid(x, x, x, indexing="ij")).reshape(3, -1).T
    W = np.einsum("i,j,k->ijk", w, w, w).ravel()
    v2 = np.sum(V * V, axis=1)
    AA = sum((V[:, i] * V[:, j] - (v2 / 3 if i == j else 0)) ** 2 for i in range(3) for j in range(3))
    BB = sum((0.5 * V[:, i] * (v2 - 5)) ** 2 for i in range(3))
    return float(W @ AA), float(W @ BB)


def test_gaussian_moment_oracle():
    AA, BB = gaussian_moment_coefficients()
    assert abs(AA - 10) < 1e-12 and abs(BB - 7.5) < 1e-12


@pytest.mark.parametrize("nu0", [1.0, 2.0, 0.5])
def test_bgk_transport_coefficients(grid20, nu0):
    # spacing 0.8 makes the midpoint rule exact to ~1e-13 on Gaussian moments
    AA, BB = gaussian_moment_coefficients()
    c = compute_transport_coefficients(BGKOperator(grid20, nu0), grid20)
    assert abs(c.lam - AA / (10 * nu0)) <= 1e-8
    assert abs(c.kappa - 2 * BB / (15 * nu0)) <= 1e-8


def test_transport_coefficients_positive():
    with pytest.raises(ValueError):
        TransportCoefficients(0.0, 1.0)
    with pytest.raises(ValueError):
        TransportCoefficients(1.0, -1.0)


def test_hard_sphere_coefficients_positive(hs12, grid12):
    c = compute_transport_coefficients(hs12, grid12)
    assert 0.05 < c.lam < 0.2 and 0.05 < c.kappa < 0.3


# ---------------------------------------------------------------------------
# Leray projection and constraint recovery

@pytest.fixture(scope="module")
def g3():
    return SpatialGrid(8, dim=3)


def test_leray_kills_gradients(g3):
    x = g3.points
    psi = np.sin(x)[:, None, None] * np.cos(2 * x)[None, :, None] * np.sin(x)[None, None, :]
    u = np.array(g3.gradient(psi))
    assert np.max(np.abs(leray_project(u, g3))) < 1e-13


def test_leray_keeps_shear(g3):
    x = g3.points
    u = np.zeros((3,) + g3.shape)
    u[0] = np.sin(x)[None, :, None]
    assert np.max(np.abs(leray_project(u, g3) - u)) < 1e-14


def test_leray_idempotent_and_mean_preserving(g3):
    rng = np.random.default_rng(0)
    u = rng.standard_normal((3,) + g3.shape)
    p = leray_project(u, g3)
    assert np.max(np.abs(leray_project(p, g3) - p)) <= 1e-12
    assert np.allclose(p.mean(axis=(1, 2, 3)), u.mean(axis=(1, 2, 3)), atol=1e-14)
    assert np.max(np.abs(divergence(p, g3))) <= 1e-10


def test_recover_single_mode():
    g = SpatialGrid(16)
    x = g.points
    rho, theta, phi = recover_rho_theta(np.cos(x), g)
    assert np.allclose(theta, np.cos(x) / 2, atol=1e-14)
    assert np.allclose(rho, -np.cos(x) / 4, atol=1e-14)
    assert np.allclose(phi, -(rho + theta), atol=1e-14)
    # Lap(rho + theta) = -(rho + theta) for the unit mode, which must equal rho
    assert np.allclose(-(rho + theta), rho, atol=1e-14)


def test_recover_zero_random_and_mean(g3):
    z = recover_rho_theta(np.zeros(g3.shape), g3)
    assert all(not np.any(a) for a in z)
    rng = np.random.default_rng(1)
    g = rng.standard_normal(g3.shape)
    g -= g.mean()
    rho, theta, _ = recover_rho_theta(g, g3)
    assert constraint_residual(rho, theta, g3) <= 1e-12
    with pytest.raises(ValueError):
        recover_rho_theta(g + 1.0, g3)


def test_initial_state_is_projected(g3):
    x = g3.points
    u0 = np.zeros((3,) + g3.shape)
    u0[0] = np.sin(x)[:, None, None]          # pure gradient, removed
    u0[1] = np.sin(x)[:, None, None]          # shear, kept
    s = fluid_state(g3, u0)
    assert np.max(np.abs(s.u[0])) < 1e-14
    assert np.allclose(s.u[1], u0[1])


# ---------------------------------------------------------------------------
# time stepping

COEF = TransportCoefficients(0.7, 0.9)


def test_shear_mode_exact_decay():
    g = SpatialGrid(8, dim=3)
    x = g.points
    u0 = np.zeros((3,) + g.shape)
    u0[0] = 0.3 * np.sin(2 * x)[None, :, None]
    run = nsfp_run(fluid_state(g, u0), COEF, 0.01, 1.0, record_every=10)
    for s in run.states:
        ref = u0 * shear_decay_factor(COEF, 2.0, s.time)
        assert np.max(np.abs(s.u - ref)) <= 1e-6 * 0.3 * max(s.time, 1e-12) + 1e-15


def test_scalar_mode_ode():
    g = SpatialGrid(16)
    x = g.points
    k = 3.0
    s0 = fluid_state(g, np.zeros((3, 16)), rho0=np.zeros(16), theta0=np.cos(k * x))
    run = nsfp_run(s0, COEF, 0.05, 2.0, record_every=8)
    rate = 2.5 * COEF.kappa * k ** 2 * (1 + k ** 2) / (1.5 + 2.5 * k ** 2)
    for s in run.states:
        assert np.allclose(s.g, s0.g * math.exp(-rate * s.time), atol=1e-13)


def smooth_flow(g):
    x = g.points
    u0 = np.zeros((3,) + g.shape)
    u0[0] = 0.5 * np.sin(x)[None, :, None] * np.cos(x)[None, None, :]
    u0[1] = 0.4 * np.cos(x)[:, None, None] * np.ones(g.shape)
    u0[2] = 0.3 * np.sin(x)[:, None, None] * np.cos(x)[None, :, None]
    th = 0.2 * np.cos(x)[:, None, None] * np.sin(x)[None, :, None]
    rho = 0.1 * np.sin(x)[None, None, :] * np.ones(g.shape)
    return fluid_state(g, u0, rho0=rho, theta0=th)


def test_divergence_and_constraint_every_step():
    g = SpatialGrid(8, dim=3)
    run = nsfp_run(smooth_flow(g), COEF, 0.02, 0.4)
    assert run.max_divergence <= 1e-10
    assert run.max_constraint_residual <= 1e-12
    s = nsfp_step(smooth_flow(g), COEF, 0.02)
    assert np.max(np.abs(divergence(s.u, g))) <= 1e-10


def test_zero_run():
    g = SpatialGrid(8, dim=3)
    run = nsfp_run(fluid_state(g, np.zeros((3,) + g.shape)), COEF, 0.1, 0.5)
    for s in run.states:
        assert not np.any(s.u) and not np.any(s.rho) and not np.any(s.theta)
    assert np.allclose(run.times, [0, .1, .2, .3, .4, .5])


def test_end_time_multiple_of_step():
    g = SpatialGrid(8)
    with pytest.raises(ValueError):
        nsfp_run(fluid_state(g, np.zeros((3, 8))), COEF, 0.3, 1.0)


def test_self_convergence_second_order():
    g = SpatialGrid(8, dim=3)
    s0 = smooth_flow(g)

    def final(dt):
        s = nsfp_run(s0, COEF, dt, 0.5, record_every=10 ** 6).states[-1]
        return np.concatenate([s.u.ravel(), s.g.ravel()])

    ref = final(1 / 512)
    e1 = np.max(np.abs(final(1 / 16) - ref))
    e2 = np.max(np.abs(final(1 / 32) - ref))
    assert 3.2 <= e1 / e2 <= 4.8


def test_energy_non_increasing_without_forcing():
    g = SpatialGrid(8, dim=3)
    run = nsfp_run(smooth_flow(g), COEF, 0.02, 1.0, forcing=False)
    E = run.series(kinetic_energy)
    assert np.all(np.diff(E) <= 1e-14 * E[0])
    assert E[-1] < E[0]
