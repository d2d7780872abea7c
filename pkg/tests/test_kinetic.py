import math

import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate

from vpblab import kinetic
from vpblab.kinetic import (BGKOperator, PotentialModel, WeightSpec, build_velocity_grid,
                            collision_frequency, project_P)

# E|Z| for a standard normal 3-vector is 2 sqrt(2/pi); nu(0) = 2 pi E|Z| = 4 sqrt(2 pi)
NU0_HARD_SPHERE = 10.026513098524001


def test_maxwellian_values():
    assert kinetic.maxwellian(np.zeros(3)) == pytest.approx(0.0634936359342410, rel=1e-14)
    v = np.array([1.0, 1.0, 0.0])
    assert kinetic.maxwellian(v) == pytest.approx((2 * math.pi) ** -1.5 * math.exp(-1), rel=1e-14)


def test_grid_mass_against_gauss_hermite(grid16):
    x, w = hermegauss(40)
    w = w / math.sqrt(2 * math.pi)
    oracle = np.einsum("i,j,k->", w, w, w)        # tensor Gauss-Hermite mass of mu
    assert oracle == pytest.approx(1.0, abs=1e-13)
    mass = np.sum(grid16.quad_weights * grid16.mu)
    assert abs(mass - oracle) < 1e-6
    assert grid16.size == 4096
    assert np.all(grid16.quad_weights > 0)


def test_grid_acceptance():
    g = build_velocity_grid(12, 6.0)
    second = np.sum(g.quad_weights * g.mu * np.sum(g.nodes ** 2, axis=1))
    assert abs(second - 3) < 1e-4
    with pytest.raises(kinetic.GridResolutionError):
        build_velocity_grid(4, 8.0)
    with pytest.raises(ValueError):
        build_velocity_grid(5, 8.0)


def test_potential_model_validation():
    assert PotentialModel(0.0).classification == "hard"
    assert PotentialModel(-0.5).classification == "soft"
    for bad in (-3.0, 1.5):
        with pytest.raises(ValueError):
            PotentialModel(bad)
    with pytest.raises(ValueError):
        PotentialModel(1.0, 0.0)


def test_angular_quadrature(angular):
    assert np.sum(angular.weights) == pytest.approx(4 * math.pi, rel=1e-12)
    d = angular.directions
    # closed under omega -> -omega
    for u in d:
        assert np.min(np.linalg.norm(d + u, axis=1)) < 1e-12
    assert angular.cutoff_factor() == pytest.approx(2 * math.pi, rel=1e-12)


def test_collision_frequency_maxwell_molecules(grid16, angular):
    nu = collision_frequency(PotentialModel(0.0), grid16, angular, np.array([[0.3, -1.2, 2.0], [0, 0, 0]]))
    assert np.allclose(nu, 2 * math.pi, rtol=1e-6)


def test_collision_frequency_hard_sphere_at_origin(grid16, angular):
    # independent oracle: radial integral of 4 pi r^3 mu(r)
    mean_speed, _ = integrate.quad(lambda r: 4 * math.pi * r ** 3 * (2 * math.pi) ** -1.5
                                   * math.exp(-r * r / 2), 0, np.inf, epsabs=1e-14)
    assert 2 * math.pi * mean_speed == pytest.approx(NU0_HARD_SPHERE, rel=1e-12)
    nu = collision_frequency(PotentialModel(1.0), grid16, angular, np.zeros(3))
    assert nu == pytest.approx(NU0_HARD_SPHERE, rel=1e-3)


def test_collision_frequency_matches_radial_reference(grid16, angular):
    rng = np.random.default_rng(3)
    v = rng.uniform(-4, 4, size=(20, 3))
    for gam in (1.0, -1.0, -2.0):
        m = PotentialModel(gam)
        a = collision_frequency(m, grid16, angular, v)
        b = kinetic.collision_frequency_radial(m, v)
        assert np.max(np.abs(a / b - 1)) < 2e-3


def test_nu_comparable_to_weight(hs12):
    for gam in (1.0,):
        ratio = hs12.nu / kinetic.weight_w(PotentialModel(gam), hs12.grid.nodes)
        assert 0 < ratio.min() <= ratio.max() < np.inf
        assert ratio.max() / ratio.min() < 5


def test_epstein_zeta_special_values():
    assert kinetic.epstein_zeta_z3(0.0) == pytest.approx(-1.0, abs=1e-12)
    assert kinetic.epstein_zeta_z3(-2.0) == 0.0
    # for s > 3 it is the convergent lattice sum; the box |n_i| <= 20 leaves a tail < 1e-12
    n = np.arange(-20, 21)
    I, J, K = np.meshgrid(n, n, n, indexing="ij")
    r2 = (I * I + J * J + K * K).astype(float)
    direct = np.sum(r2[r2 > 0] ** -5.0)
    assert kinetic.epstein_zeta_z3(10.0) == pytest.approx(direct, rel=1e-10)


def test_linearized_operator_invariants(hs12):
    op = hs12
    g = op.grid
    scale = np.max(op.nu)
    assert op.defects["symmetry"] <= 1e-9 * scale
    assert np.max(np.abs(op.matrix - op.matrix.T)) <= 1e-9 * scale
    assert np.linalg.norm(op.apply(g.sqrt_mu)) <= 1e-8 * scale
    rng = np.random.default_rng(0)
    F = rng.standard_normal((100, g.size))
    q = np.sum((F @ op.matrix) * F * g.quad_weights, axis=1)
    n2 = np.sum(F * F * g.quad_weights, axis=1)
    assert np.all(q >= -1e-9 * n2)


def test_kernel_dimension_and_gap(hs12):
    kdim, ev = kinetic.kernel_dimension(hs12)
    assert kdim == 5
    sigma = hs12.sigma0_estimate
    assert sigma > 0
    assert ev[5] > sigma / 2


def test_gap_two_resolutions(hs12, hs16):
    a, b = hs12.sigma0_estimate, hs16.sigma0_estimate
    assert abs(a - b) / b < 0.2


def test_bgk_gap():
    g = build_velocity_grid(12, 6.0)
    assert kinetic.spectral_gap_estimate(BGKOperator(g, 1.0)) == 1.0


def test_projection_basis_elements(grid12):
    g = grid12
    m, Pf = project_P(g.sqrt_mu, g)
    assert m.a == pytest.approx(1, abs=1e-6) and np.allclose(m.b, 0, atol=1e-6)
    assert m.c == pytest.approx(0, abs=1e-6)
    assert np.allclose(Pf, g.sqrt_mu, atol=1e-12)
    f = g.nodes[:, 0] * g.sqrt_mu
    m, Pf = project_P(f, g)
    assert np.allclose(m.b, [1, 0, 0], atol=1e-6) and np.allclose(Pf, f, atol=1e-12)


def test_projection_second_moment(grid16):
    g = grid16
    V = g.nodes
    f = V[:, 0] ** 2 * g.sqrt_mu
    m, Pf = project_P(f, g)
    # Gaussian moments E v1^4 = 3, E v1^2 v2^2 = 1 give (a, b, c) = (1, 0, 2/3)
    assert m.a == pytest.approx(1.0, abs=1e-6)
    assert np.allclose(m.b, 0, atol=1e-9)
    assert m.c == pytest.approx(2 / 3, abs=1e-6)
    A11 = (V[:, 0] ** 2 - np.sum(V * V, axis=1) / 3) * g.sqrt_mu
    assert np.max(np.abs((f - Pf) - A11)) < 1e-6


def test_projection_idempotent(grid12):
    g = grid12
    rng = np.random.default_rng(1)
    f = rng.standard_normal((10, g.size)) * g.sqrt_mu
    _, Pf = project_P(f, g)
    _, PPf = project_P(Pf, g)
    assert np.max(np.abs(PPf - Pf)) < 1e-6 * np.max(np.abs(Pf))
    micro = kinetic.micro_part(kinetic.invariant_basis(g), g)
    assert np.max(np.abs(micro)) < 1e-10
    m = project_P(f, g)[0]
    back = kinetic.reconstruct(m, g)
    assert np.allclose(back, Pf, atol=1e-10)


def test_fluid_temperature_matches_projection(grid16):
    g = grid16
    rng = np.random.default_rng(2)
    f = rng.standard_normal(g.size) * g.sqrt_mu
    m, _ = project_P(f, g)
    rho, u, theta = kinetic.fluid_variables(f, g)
    assert theta == pytest.approx(m.c, abs=1e-6)
    assert rho == pytest.approx(m.a, abs=1e-6)


def test_invert_L_micro(hs12, grid12):
    g = grid12
    assert np.all(kinetic.invert_L_micro(hs12, np.zeros(g.size)) == 0)
    A, _ = kinetic.burnett_sources(g)
    bgk = BGKOperator(g, 2.0)
    rhs = A[(0, 1)]
    assert np.allclose(kinetic.invert_L_micro(bgk, rhs), rhs / 2.0, atol=1e-12)
    rhs = kinetic.micro_part(A[(0, 0)], g)
    sol = kinetic.invert_L_micro(hs12, rhs)
    # dense-solve residual oracle
    res = np.linalg.norm(hs12.matrix @ sol - rhs) / np.linalg.norm(rhs)
    assert res < 1e-8
    with pytest.raises(ValueError):
        kinetic.invert_L_micro(hs12, g.sqrt_mu)


def test_weights():
    hard, soft = PotentialModel(1.0), PotentialModel(-1.0)
    assert kinetic.weight_w(hard, np.zeros(3)) == 1.0
    assert kinetic.weight_w(soft, np.array([1.0, 1.0, 1.0])) == pytest.approx(0.5)
    wspec = WeightSpec(0.02, 0.1)
    v = np.array([1.0, 2.0, 0.5])
    v2 = v @ v
    assert kinetic.weight_w_theta(wspec, 0.0, v) == pytest.approx(math.exp(0.04 * v2))
    ts = [0, 1, 10, 1e3, 1e40]
    w = [kinetic.weight_w_theta(wspec, t, v) for t in ts]
    assert all(a >= b for a, b in zip(w, w[1:]))
    assert w[-1] == pytest.approx(math.exp(0.02 * v2), rel=1e-2)
    th = wspec.theta_tilde(np.array(ts))
    assert np.all((th >= 0.02) & (th <= 0.04))
    with pytest.raises(ValueError):
        WeightSpec(0.1, 0.1)
    with pytest.raises(ValueError):
        WeightSpec(0.01, 0.3)


def test_gamma_zero_and_equilibrium(grid12, angular):
    g = grid12
    m = PotentialModel(1.0)
    rng = np.random.default_rng(5)
    h = rng.standard_normal(g.size) * g.sqrt_mu
    assert np.all(kinetic.gamma_bilinear(m, g, angular, np.zeros(g.size), h, conservative=False) == 0)
    eq = kinetic.gamma_bilinear(m, g, angular, g.sqrt_mu, conservative=False)
    assert np.max(np.abs(eq)) < 1e-6


def test_gamma_linearization_consistent_with_L(grid12, angular, hs12):
    # -Gamma(sqrt mu, f) - Gamma(f, sqrt mu) and the assembled L discretize the same operator
    g = grid12
    m = PotentialModel(1.0)
    V = g.nodes
    f = kinetic.micro_part(V[:, 0] * V[:, 1] * g.sqrt_mu, g)
    lin = -(kinetic.gamma_bilinear(m, g, angular, g.sqrt_mu, f)
            + kinetic.gamma_bilinear(m, g, angular, f, g.sqrt_mu))
    Lf = hs12.apply(f)
    assert np.linalg.norm(lin - Lf) / np.linalg.norm(Lf) < 0.2


def test_gamma_bgk_matches_maxwellian_expansion(grid12):
    # second-order term of nu0 (M[F] - F) / (eps^2 sqrt mu) along F = mu + eps sqrt(mu) f,
    # with rho and T measured relative to the discrete moments of mu itself
    g = grid12
    nu0 = 1.3
    eps = 1e-3
    f = kinetic.reconstruct(kinetic.FluidMoments(0.4, np.array([0.1, -0.2, 0.3]), -0.5), g)
    w = g.quad_weights
    V = g.nodes

    def moments(F):
        rho = np.sum(F * w)
        u = np.sum(F[:, None] * V * w[:, None], axis=0) / rho
        T = np.sum(F * np.sum((V - u) ** 2, axis=1) * w) / (3 * rho)
        return rho, u, T

    rho0, _, T0 = moments(g.mu)
    rho, u, T = moments(g.mu + eps * g.sqrt_mu * f)
    F = g.mu + eps * g.sqrt_mu * f
    M = kinetic.local_maxwellian_ratio(g, rho / rho0, u, T / T0) * g.mu
    quad = nu0 * (M - F) / (eps ** 2 * g.sqrt_mu)
    out = kinetic.gamma_bgk(g, nu0, f, conservative=False)
    mask = np.sum(V ** 2, axis=1) < 9
    assert np.max(np.abs(quad - out)[mask]) < 5e-3 * np.max(np.abs(out))
