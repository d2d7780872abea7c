"""Velocity-space discretization and collision operators.

Perturbations f are stored as nodal values on a uniform tensor grid in v.
All inner products are <f, g> = sum_i w_i f_i g_i with equal weights w_i = h^3,
so matrices acting on nodal values are symmetric exactly when the operator
is symmetric for the discrete inner product.
"""
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import linalg, sparse
from scipy.sparse.linalg import LinearOperator, cg, eigsh
from scipy.special import erf, exp1, gammaincc, i0e
from scipy.special import gamma as gamma_fn

from . import _kernels

TOL_MOMENT = 1e-6
TOL_CONS = 1e-6
TOL_SOLVE = 1e-8
MU_NORM = (2.0 * np.pi) ** -1.5


class GridResolutionError(ValueError):
    """Raised when a velocity grid cannot integrate the Maxwellian moments."""


class AssemblyError(RuntimeError):
    pass


def maxwellian(v):
    v = np.asarray(v, dtype=float)
    return MU_NORM * np.exp(-0.5 * np.sum(v * v, axis=-1))


@dataclass(frozen=True)
class PotentialModel:
    gamma: float
    angular_amplitude: float = 1.0

    def __post_init__(self):
        if not (-3.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must lie in (-3, 1], got {self.gamma}")
        if not self.angular_amplitude > 0:
            raise ValueError("angular_amplitude must be positive")

    @property
    def classification(self):
        return "hard" if self.gamma >= 0 else "soft"


@dataclass(frozen=True, eq=False)
class VelocityGrid:
    axis: np.ndarray
    nodes: np.ndarray
    quad_weights: np.ndarray
    per_axis_count: int
    truncation_radius: float
    mu: np.ndarray = field(repr=False)
    sqrt_mu: np.ndarray = field(repr=False)

    @property
    def spacing(self):
        return self.axis[1] - self.axis[0]

    @property
    def size(self):
        return self.nodes.shape[0]

    @property
    def cell_volume(self):
        return self.quad_weights[0]

    def inner(self, f, g):
        return np.sum(self.quad_weights * f * np.conj(g), axis=-1)

    def norm2(self, f):
        return np.real(self.inner(f, f))


def build_velocity_grid(per_axis_count, truncation_radius, tol=TOL_MOMENT):
    """Cell-centred uniform tensor grid on [-R, R]^3 with equal weights h^3.

    For integrands that vanish at the box faces the midpoint and trapezoidal
    rules coincide up to the (negligible) face values; the midpoint layout
    keeps every weight equal.
    """
    n = int(per_axis_count)
    R = float(truncation_radius)
    if n < 4 or n % 2:
        raise ValueError("per_axis_count must be an even integer >= 4")
    if R < 6:
        raise ValueError("truncation_radius must be >= 6")
    h = 2 * R / n
    axis = -R + (np.arange(n) + 0.5) * h
    V = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    w = np.full(V.shape[0], h ** 3)
    mu = maxwellian(V)
    mass = np.sum(w * mu)
    second = np.sum(w * mu * np.sum(V * V, axis=1))
    if abs(mass - 1) > tol or abs(second - 3) > tol:
        raise GridResolutionError(
            f"grid ({n}, {R}) under-resolves the Maxwellian: mass {mass:.3e}, "
            f"second moment {second:.3e}")
    return VelocityGrid(axis, V, w, n, R, mu, np.sqrt(mu))


@dataclass(frozen=True, eq=False)
class AngularQuadrature:
    directions: np.ndarray
    weights: np.ndarray
    cos_nodes: np.ndarray       # Gauss-Legendre nodes of cos(theta) in (0, 1)
    cos_weights: np.ndarray
    n_azimuth: int

    def cutoff_factor(self, amp=1.0):
        """Quadrature of amp*|cos theta| over the sphere, pole along v - v*."""
        return amp * np.sum(self.weights * np.abs(self.directions[:, 2]))


def build_angular_quadrature(n_polar=4, n_azimuth=8):
    """Gauss-Legendre in cos(theta) split at 0, uniform in azimuth.

    The cos-nodes on [0, 1] are mirrored to [-1, 0] and the azimuths are
    offset by half a step, so the node set is closed under omega -> -omega
    and |cos theta| is integrated exactly.
    """
    if n_polar < 2 or n_polar % 2 or n_azimuth < 2 or n_azimuth % 2:
        raise ValueError("n_polar and n_azimuth must be even and >= 2")
    x, wx = leggauss(n_polar // 2)
    cn = 0.5 * (x + 1)
    cw = 0.5 * wx
    cos = np.concatenate([-cn[::-1], cn])
    cwt = np.concatenate([cw[::-1], cw])
    phi = (np.arange(n_azimuth) + 0.5) * 2 * np.pi / n_azimuth
    C, P = np.meshgrid(cos, phi, indexing="ij")
    S = np.sqrt(1 - C ** 2)
    dirs = np.stack([S * np.cos(P), S * np.sin(P), C], axis=-1).reshape(-1, 3)
    wts = (cwt[:, None] * np.full(n_azimuth, 2 * np.pi / n_azimuth)).reshape(-1)
    return AngularQuadrature(dirs, wts, cn, cw, n_azimuth)


@dataclass(frozen=True)
class WeightSpec:
    vartheta: float
    sigma_exp: float
    ell: float = 1.0
    ell0: float = 0.0
    vartheta_cap: float = 0.05

    def __post_init__(self):
        if not (0 < self.vartheta <= self.vartheta_cap):
            raise ValueError(f"vartheta must lie in (0, {self.vartheta_cap}]")
        if not (0 < self.sigma_exp <= 0.25):
            raise ValueError("sigma_exp must lie in (0, 1/4]")

    def theta_tilde(self, t):
        return self.vartheta * (1 + (1 + np.asarray(t, dtype=float)) ** (-self.sigma_exp))


def weight_w(model, v):
    v = np.asarray(v, dtype=float)
    bracket = np.sqrt(1 + np.sum(v * v, axis=-1))
    return bracket if model.gamma >= 0 else bracket ** model.gamma


def weight_w_theta(wspec, t, v):
    v = np.asarray(v, dtype=float)
    return np.exp(wspec.theta_tilde(t) * np.sum(v * v, axis=-1))


# ---------------------------------------------------------------------------
# quadrature of a cube cell around a singular point

@lru_cache(maxsize=8)
def _unit_cell_rule(n_face=4, n_radial=6):
    """Offsets and weights integrating over [-1/2, 1/2]^3 with a point singularity at 0.

    The cube is split into six pyramids with apex at the centre; each is
    mapped to (s, a, b) with s = t^2 so that |x|^gamma s^2 ds stays
    integrable-smooth down to gamma = -2.5.
    """
    x, wx = leggauss(n_face)
    a = 0.5 * x
    wa = 0.5 * wx
    t, wt = leggauss(n_radial)
    t = 0.5 * (t + 1)
    wt = 0.5 * wt
    A, B, T = np.meshgrid(a, a, t, indexing="ij")
    W = (wa[:, None, None] * wa[None, :, None] * wt[None, None, :]) * T ** 5
    S = T ** 2
    face = np.stack([S * A, S * B, 0.5 * S], axis=-1).reshape(-1, 3)
    W = W.reshape(-1)
    offs = []
    for d in range(3):
        for sign in (1.0, -1.0):
            p = np.roll(face, d + 1, axis=1)
            p[:, d] *= sign
            offs.append(p)
    return np.concatenate(offs), np.tile(W, 6)


def cell_rule(h, n_face=4, n_radial=6):
    offs, w = _unit_cell_rule(n_face, n_radial)
    return offs * h, w * h ** 3


# ---------------------------------------------------------------------------
# collision frequency

def _upper_gamma(a, x):
    x = np.asarray(x, dtype=float)
    if a > 0:
        return gammaincc(a, x) * gamma_fn(a)
    if a == 0:
        return exp1(x)
    return (_upper_gamma(a + 1, x) - x ** a * np.exp(-x)) / a


@lru_cache(maxsize=32)
def epstein_zeta_z3(s, M=6):
    """Analytic continuation of sum over nonzero m in Z^3 of |m|^(-s).

    Uses the theta-function split at t = 1 (each half converges like a
    Gaussian in |m|).  Z(0) = -1 and Z vanishes at negative even integers.
    """
    s = float(s)
    if s == 0:
        return -1.0
    if s < 0 and s == round(s) and round(s) % 2 == 0:
        return 0.0
    r = np.arange(-M, M + 1)
    I, J, K = np.meshgrid(r, r, r, indexing="ij")
    m2 = (I * I + J * J + K * K).ravel()
    x = np.pi * m2[m2 > 0]
    tot = np.sum(_upper_gamma(s / 2, x) * x ** (-s / 2)
                 + _upper_gamma((3 - s) / 2, x) * x ** (-(3 - s) / 2))
    return float(np.pi ** (s / 2) / gamma_fn(s / 2) * (tot - 2 / s - 2 / (3 - s)))


def collision_frequency(model, grid, angular, v):
    """nu(v) by quadrature over the velocity grid and the angular rule.

    The node lattice is translated so the evaluation point is a lattice
    point.  That point carries the corrections of the punctured trapezoidal
    rule, -Z(-gamma) h^(3+gamma) mu(v) - Z(-gamma-2) h^(5+gamma) Lap mu(v) / 6
    (Z the Epstein zeta function of the cubic lattice), and the other lattice
    points the plain weight h^3.
    """
    pts = np.atleast_2d(np.asarray(v, dtype=float))
    h = grid.spacing
    gam = model.gamma
    centre = -epstein_zeta_z3(-gam) * h ** (3 + gam)
    laplace = -epstein_zeta_z3(-gam - 2) * h ** (5 + gam) / 6.0
    radial = _kernels.relative_speed_moment(pts, grid.nodes, grid.cell_volume, h,
                                            float(gam), float(centre), float(laplace))
    nu = angular.cutoff_factor(model.angular_amplitude) * radial
    return nu[0] if np.ndim(v) == 1 else nu


def collision_frequency_radial(model, v, n_nodes=200):
    """High-accuracy nu(v) from the law of |v - Z|, Z standard normal.

    The density of r = |v - Z| is r/(s sqrt(2 pi)) (exp(-(r-s)^2/2) - exp(-(r+s)^2/2))
    with s = |v|; the expectation of r^gamma is done by Gauss-Legendre on
    panels.  Used as an independent reference for the grid quadrature.
    """
    s = np.linalg.norm(np.atleast_2d(np.asarray(v, dtype=float)), axis=-1)
    g = model.gamma
    x, w = leggauss(n_nodes)
    out = np.empty_like(s)
    for k, sk in enumerate(s):
        hi = sk + 12.0
        if sk > 12.0:
            # density lives in [s - 12, s + 12], away from the r^gamma singularity
            r = sk + 12.0 * x
            wu = w
            jac = 12.0
        else:
            # substitute r = hi * u^2 to tame r^gamma near 0
            u = 0.5 * (x + 1)
            wu = 0.5 * w
            r = hi * u * u
            jac = 2 * hi * u
        if sk < 1e-8:
            dens = np.sqrt(2 / np.pi) * r * r * np.exp(-0.5 * r * r)
        else:
            dens = r / (sk * np.sqrt(2 * np.pi)) * (np.exp(-0.5 * (r - sk) ** 2)
                                                    - np.exp(-0.5 * (r + sk) ** 2))
        out[k] = np.sum(wu * jac * r ** g * dens)
    out *= 2 * np.pi * model.angular_amplitude
    return out[0] if np.ndim(v) == 1 else out


def hard_sphere_mean_speed(v):
    """E|v - Z| for Z standard normal (closed form)."""
    s = np.linalg.norm(np.atleast_1d(np.asarray(v, dtype=float)), axis=-1)
    s = np.maximum(s, 1e-300)
    small = s < 1e-6
    val = np.sqrt(2 / np.pi) * np.exp(-0.5 * s * s) + (s + 1 / s) * erf(s / np.sqrt(2))
    return np.where(small, 2 * np.sqrt(2 / np.pi), val)


# ---------------------------------------------------------------------------
# plane integral table for the gain kernel

def plane_integral_remainder(r, p, gamma, n_inner=48, panel=1.0, n_panel=12, rho_max=None):
    """Bounded remainder R with I(r,p) = 2 pi (exp(-p^2/2) S(r) + R(r,p)).

    S(r) = int_0^1 (r^2+s^2)^((gamma-1)/2) s ds carries the r -> 0
    singularity; R is finite at r = 0 for every gamma > -3.
    """
    r = np.asarray(r, dtype=float)[..., None]
    p = np.asarray(p, dtype=float)[..., None]
    if rho_max is None:
        rho_max = float(np.max(p)) + 14.0
    e = 0.5 * (gamma - 1)
    x, w = leggauss(n_inner)
    t = 0.5 * (x + 1)
    s = t * t
    ws = 0.5 * w * 2 * t
    G = np.exp(-0.5 * (p - s) ** 2) * i0e(p * s)
    inner = np.sum(ws * (r * r + s * s) ** e * s * (G - np.exp(-0.5 * p * p)), axis=-1)
    npan = int(np.ceil((rho_max - 1) / panel))
    xp, wp = leggauss(n_panel)
    edges = 1 + panel * np.arange(npan)
    s = (edges[:, None] + 0.5 * panel * (xp[None, :] + 1)).reshape(-1)
    ws = np.tile(0.5 * panel * wp, npan)
    G = np.exp(-0.5 * (p - s) ** 2) * i0e(p * s)
    outer = np.sum(ws * (r * r + s * s) ** e * s * G, axis=-1)
    return inner + outer


@lru_cache(maxsize=16)
def remainder_table(gamma, p_max, step=0.05, r_max=14.0):
    nr = int(np.ceil(r_max / step)) + 4
    npp = int(np.ceil(p_max / step)) + 4
    r = step * np.arange(nr)
    p = step * np.arange(npp)
    if gamma == 1.0:
        return np.zeros((nr, npp)), step
    tab = np.empty((nr, npp))
    for i in range(nr):
        tab[i] = plane_integral_remainder(np.full(npp, r[i]), p, gamma,
                                          rho_max=p_max + 14.0)
    return tab, step


def plane_integral(r, p, gamma):
    """Reference evaluation of I(r, p) (vectorized, no table)."""
    r = np.asarray(r, dtype=float)
    p = np.asarray(p, dtype=float)
    if gamma == 1.0:
        return np.full(np.broadcast(r, p).shape, 2 * np.pi)
    S = np.vectorize(lambda x: _kernels.singular_part(float(x), float(gamma)))(r)
    return 2 * np.pi * (np.exp(-0.5 * p * p) * S + plane_integral_remainder(r, p, gamma))


def _kernel_setup(model, grid):
    p_max = math.sqrt(3.0) * grid.truncation_radius + 1.0
    tab, step = remainder_table(float(model.gamma), round(p_max, 6))
    return tab, step


def kernel_matrix_entries(model, grid, v, w):
    """Continuous kernel K(v, w) at arbitrary pairs (for tests and diagnostics)."""
    tab, step = _kernel_setup(model, grid)
    v = np.atleast_2d(v)
    w = np.atleast_2d(w)
    out = np.empty(max(len(v), len(w)))
    vb, wb = np.broadcast_arrays(v, w)
    for k in range(len(out)):
        out[k] = _kernels.kernel_value(*vb[k], *wb[k], float(model.gamma),
                                       float(model.angular_amplitude), tab, step, step)
    return out


# ---------------------------------------------------------------------------
# invariants and projection

def canonical_basis(grid):
    V = grid.nodes
    sm = grid.sqrt_mu
    return np.vstack([sm, V[:, 0] * sm, V[:, 1] * sm, V[:, 2] * sm,
                      0.5 * (np.sum(V * V, axis=1) - 3) * sm])


@lru_cache(maxsize=16)
def _basis_cache(grid):
    C = canonical_basis(grid)
    sw = np.sqrt(grid.quad_weights)
    Q, R = np.linalg.qr((C * sw).T)
    sgn = np.sign(np.diag(R))
    Q = Q * sgn
    R = R * sgn[:, None]
    E = Q.T / sw
    to_canonical = np.linalg.inv(R.T)      # E = to_canonical @ C
    return E, to_canonical


def invariant_basis(grid):
    """Five vectors orthonormal for the discrete inner product spanning the invariants."""
    return _basis_cache(grid)[0]


@dataclass
class FluidMoments:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def stacked(self):
        """(..., 5) array ordered a, b1, b2, b3, c."""
        return np.concatenate([np.asarray(self.a)[..., None], np.asarray(self.b),
                               np.asarray(self.c)[..., None]], axis=-1)


def macro_coefficients(f, grid):
    """Coefficients of Pf in the orthonormal invariant basis (last axis = velocity)."""
    E, _ = _basis_cache(grid)
    return (np.asarray(f) * grid.quad_weights) @ E.T


def project_P(f, grid):
    """Return (FluidMoments, Pf) with Pf = (a + b.v + c(|v|^2-3)/2) sqrt(mu)."""
    E, T = _basis_cache(grid)
    coef = macro_coefficients(f, grid)
    Pf = coef @ E
    alpha = coef @ T
    return FluidMoments(alpha[..., 0], alpha[..., 1:4], alpha[..., 4]), Pf


def reconstruct(moments, grid):
    C = canonical_basis(grid)
    a = np.asarray(moments.a)
    alpha = np.concatenate([a[..., None], np.asarray(moments.b), np.asarray(moments.c)[..., None]],
                           axis=-1)
    return alpha @ C


def micro_part(f, grid):
    return f - project_P(f, grid)[1]


def fluid_variables(f, grid):
    """rho = <f, sqrt mu>, u = <f, v sqrt mu>, theta = <f, (|v|^2/3 - 1) sqrt mu>."""
    sm = grid.sqrt_mu
    V = grid.nodes
    w = grid.quad_weights
    fw = np.asarray(f) * w
    rho = fw @ sm
    u = fw @ (V * sm[:, None])
    theta = fw @ ((np.sum(V * V, axis=1) / 3 - 1) * sm)
    return rho, u, theta


# ---------------------------------------------------------------------------
# linearized operator

class LinearizedOperator:
    """Dense L = diag(nu) - K on the nodes, with its invariant basis.

    ``matrix`` holds L itself; K is formed on demand.  ``defects`` records
    the symmetry defect before symmetrization and the null-space defect
    before the conservative projection.
    """

    def __init__(self, model, grid, nu, matrix, defects=None, sigma0=None):
        self.model = model
        self.grid = grid
        self.nu = nu
        self.matrix = matrix
        self.invariant_basis = invariant_basis(grid)
        self.defects = defects or {}
        self._sigma0 = sigma0
        self._shift_cache = {}
        self._pinv = None

    @property
    def K(self):
        return np.diag(self.nu) - self.matrix

    @property
    def size(self):
        return self.grid.size

    @property
    def sigma0_estimate(self):
        if self._sigma0 is None:
            self._sigma0 = spectral_gap_estimate(self)
        return self._sigma0

    def apply(self, f):
        return np.asarray(f) @ self.matrix

    def projector(self):
        E = self.invariant_basis
        return (E.T * self.grid.quad_weights) @ E

    def shifted_solve(self, tau, rhs):
        """Solve (I + tau L) x = rhs for each row of rhs."""
        key = float(tau)
        fac = self._shift_cache.get(key)
        if fac is None:
            A = np.eye(self.size) + key * self.matrix
            fac = linalg.cho_factor(A, lower=True, check_finite=False)
            self._shift_cache = {key: fac}
        rhs = np.asarray(rhs)
        flat = rhs.reshape(-1, self.size)
        out = linalg.cho_solve(fac, flat.T, check_finite=False).T
        return out.reshape(rhs.shape)

    def solve_micro(self, rhs):
        """Solve L g = rhs on the complement of the invariants (rhs micro)."""
        E = self.invariant_basis
        w = self.grid.quad_weights
        scale = float(np.max(self.nu))
        n = self.size
        P = lambda x: (x * w) @ E.T @ E
        diag = self.nu.copy()

        def mv(x):
            return self.matrix @ x + scale * P(x)

        A = LinearOperator((n, n), matvec=mv, dtype=float)
        M = LinearOperator((n, n), matvec=lambda x: x / diag, dtype=float)
        g, info = cg(A, rhs, rtol=1e-13, atol=0.0, maxiter=5000, M=M)
        res = np.linalg.norm(self.matrix @ g - rhs)
        if info != 0 or res > 1e-2 * TOL_SOLVE * max(np.linalg.norm(rhs), 1e-300):
            # fall back to a dense solve of the shifted SPD system
            A = self.matrix + scale * (E.T * w) @ E
            g = linalg.solve(A, rhs, assume_a="pos")
        return g - P(g)


class BGKOperator:
    """Relaxation surrogate L = nu0 (I - P) with the same interface."""

    def __init__(self, grid, nu0=1.0):
        if not nu0 > 0:
            raise ValueError("nu0 must be positive")
        self.grid = grid
        self.nu0 = float(nu0)
        self.model = None
        self.nu = np.full(grid.size, self.nu0)
        self.invariant_basis = invariant_basis(grid)
        self.defects = {"symmetry": 0.0, "null_space": 0.0}

    @property
    def size(self):
        return self.grid.size

    @property
    def matrix(self):
        return self.nu0 * (np.eye(self.size) - self.projector())

    @property
    def K(self):
        return self.nu0 * self.projector()

    @property
    def sigma0_estimate(self):
        return 1.0

    def projector(self):
        E = self.invariant_basis
        return (E.T * self.grid.quad_weights) @ E

    def _P(self, f):
        E = self.invariant_basis
        return ((np.asarray(f) * self.grid.quad_weights) @ E.T) @ E

    def apply(self, f):
        return self.nu0 * (f - self._P(f))

    def shifted_solve(self, tau, rhs):
        Pf = self._P(rhs)
        return Pf + (rhs - Pf) / (1 + tau * self.nu0)

    def relax(self, tau, f, source=None):
        """Exact solution of df/ds = -L f + source over s in [0, tau], source micro and constant."""
        Pf = self._P(f)
        decay = np.exp(-tau * self.nu0)
        out = Pf + decay * (f - Pf)
        if source is not None:
            out = out + (1 - decay) / self.nu0 * source
        return out

    def solve_micro(self, rhs):
        return (rhs - self._P(rhs)) / self.nu0


def _conservative_projection(L, E, w):
    """L <- (I - Pi) L (I - Pi) with Pi the w-orthogonal projector onto span(E)."""
    B = E * w                         # rows: w * e_a
    LE = L @ E.T                      # (n, 5)
    BL = B @ L                        # (5, n)
    G = B @ LE                        # (5, 5)
    L -= E.T @ BL
    L -= LE @ B
    L += E.T @ G @ B
    return L


def assemble_linearized(model, grid, angular, chunk=512, compute_gap=False):
    """Assemble L = diag(nu) - K on the grid.

    Off-diagonal entries are h^3 K(v_i, v_j); each diagonal entry of K is the
    integral of the kernel over the node's own cell (the kernel has an
    integrable singularity on the diagonal).  L is then symmetrized and
    projected so that the five invariants span its null space exactly.
    """
    tab, step = _kernel_setup(model, grid)
    n = grid.size
    g = float(model.gamma)
    amp = float(model.angular_amplitude)
    nu = collision_frequency(model, grid, angular, grid.nodes)
    L = np.empty((n, n))
    for r0 in range(0, n, chunk):
        r1 = min(n, r0 + chunk)
        _kernels.fill_kernel(grid.nodes, grid.cell_volume, g, amp, tab, step, step,
                             L[r0:r1], r0, r1)
    offs, qw = cell_rule(grid.spacing)
    kdiag = _kernels.cell_kernel(grid.nodes, offs, qw, g, amp, tab, step, step)
    L *= -1.0
    L[np.diag_indices(n)] = nu - kdiag
    scale = float(np.max(nu))
    sym = _max_asymmetry(L)
    if sym > 1e-9 * scale:
        raise AssemblyError(f"symmetry defect {sym:.3e} exceeds tolerance")
    L += L.T
    L *= 0.5
    E = invariant_basis(grid)
    null_raw = float(np.max(np.linalg.norm(E @ L, axis=1) * math.sqrt(grid.cell_volume)))
    _conservative_projection(L, E, grid.quad_weights)
    L += L.T
    L *= 0.5
    null_after = float(np.max(np.linalg.norm(E @ L, axis=1) * math.sqrt(grid.cell_volume)))
    defects = {"symmetry": sym, "null_space_raw": null_raw, "null_space": null_after,
               "nu_max": scale}
    op = LinearizedOperator(model, grid, nu, L, defects)
    if compute_gap:
        op._sigma0 = spectral_gap_estimate(op)
    return op


def _max_asymmetry(A, block=1024):
    n = A.shape[0]
    worst = 0.0
    for i in range(0, n, block):
        for j in range(i, n, block):
            d = np.max(np.abs(A[i:i + block, j:j + block] - A[j:j + block, i:i + block].T))
            worst = max(worst, float(d))
    return worst


def spectral_gap_estimate(op, tol=1e-9):
    """min <Lf, f> / ||f||_nu^2 over f orthogonal to the invariants."""
    if isinstance(op, BGKOperator):
        return 1.0
    grid = op.grid
    n = op.size
    d = np.sqrt(op.nu)
    E = op.invariant_basis
    # constraint f . (w E) = 0  <=>  g . (w E / d) = 0 with g = d f
    Q, _ = np.linalg.qr((E * grid.quad_weights / d).T)
    shift = 4.0 * float(np.max(op.nu / op.nu.min()))

    def mv(x):
        y = x - Q @ (Q.T @ x)
        z = (op.matrix @ (y / d)) / d
        z = z - Q @ (Q.T @ z)
        return z + shift * (Q @ (Q.T @ x))

    A = LinearOperator((n, n), matvec=mv, dtype=float)
    v0 = np.ones(n) / np.sqrt(n)
    vals = eigsh(A, k=1, which="SA", tol=tol, v0=v0, return_eigenvectors=False)
    sigma = float(vals[0])
    if not sigma > 0:
        raise AssemblyError(f"non-positive spectral gap estimate {sigma:.3e}")
    return sigma


def kernel_dimension(op, rel_threshold=1e-8, dense_limit=5000):
    """Count eigenvalues of L below rel_threshold * max(nu).

    Returns (count, lowest eigenvalues).  Dense eigvalsh is used up to
    dense_limit nodes; beyond that the null space is checked directly and
    the smallest eigenvalue on its complement comes from Lanczos.
    """
    thr = rel_threshold * float(np.max(op.nu))
    if op.size <= dense_limit:
        ev = linalg.eigvalsh(op.matrix, subset_by_index=[0, 9], check_finite=False)
        return int(np.sum(ev < thr)), ev
    E = op.invariant_basis
    null = np.linalg.norm(E @ op.matrix, axis=1) * math.sqrt(op.grid.cell_volume)
    Q, _ = np.linalg.qr((E * op.grid.quad_weights).T)
    n = op.size

    big = float(np.max(op.nu))

    def mv(x):
        y = x - Q @ (Q.T @ x)
        z = op.matrix @ y
        return z - Q @ (Q.T @ z) + big * (Q @ (Q.T @ x))

    A = LinearOperator((n, n), matvec=mv, dtype=float)
    lo = eigsh(A, k=1, which="SA", tol=1e-10, return_eigenvectors=False)
    ev = np.concatenate([np.zeros(5) + null, lo])
    return int(np.sum(null < thr) + np.sum(lo < thr)), ev


def invert_L_micro(op, rhs, tol=TOL_MOMENT):
    """g with L g = rhs and g orthogonal to the invariants."""
    rhs = np.asarray(rhs, dtype=float)
    grid = op.grid
    nrm = math.sqrt(grid.norm2(rhs))
    if nrm == 0:
        return np.zeros_like(rhs)
    coef = macro_coefficients(rhs, grid)
    if np.linalg.norm(coef) > tol * nrm:
        raise ValueError(f"rhs has a macroscopic component {np.linalg.norm(coef):.3e}")
    rhs = rhs - coef @ op.invariant_basis
    g = op.solve_micro(rhs)
    res = math.sqrt(grid.norm2(op.apply(g) - rhs))
    if res > TOL_SOLVE * nrm:
        raise AssemblyError(f"micro inversion residual {res:.3e}")
    return g


def burnett_sources(grid):
    """A(v) sqrt(mu) (six independent entries) and B(v) sqrt(mu) (three entries)."""
    V = grid.nodes
    sm = grid.sqrt_mu
    v2 = np.sum(V * V, axis=1)
    A = {}
    for i in range(3):
        for j in range(i, 3):
            A[(i, j)] = (V[:, i] * V[:, j] - (v2 / 3 if i == j else 0)) * sm
    B = [0.5 * V[:, i] * (v2 - 5) * sm for i in range(3)]
    return A, B


# ---------------------------------------------------------------------------
# nonlinear collision operator

def gamma_bilinear(model, grid, angular, f, g=None, conservative=True, return_raw=False):
    """Discrete Gamma(f, g) = mu^(-1/2) Q(sqrt(mu) f, sqrt(mu) g).

    f and g may be single profiles or stacks (rows).  Post-collision values
    come from trilinear interpolation of f/sqrt(mu); since
    mu(v')mu(v*') = mu(v)mu(v*) this makes Gamma(sqrt mu, sqrt mu) vanish
    exactly.  With ``conservative`` the residual component along the
    collision invariants is removed by orthogonal projection; the raw
    invariant moments are returned as well when ``return_raw`` is set.
    """
    f = np.asarray(f, dtype=float)
    g = f if g is None else np.asarray(g, dtype=float)
    single = f.ndim == 1
    F = np.atleast_2d(f).reshape(-1, grid.size)
    G = np.atleast_2d(g).reshape(-1, grid.size)
    hf = np.ascontiguousarray((F / grid.sqrt_mu).T)
    hg = np.ascontiguousarray((G / grid.sqrt_mu).T)
    raw = _kernels.gamma_quadrature(hf, hg, grid.nodes, grid.mu, grid.cell_volume,
                                    float(grid.axis[0]), float(grid.spacing),
                                    grid.per_axis_count, float(model.gamma),
                                    float(model.angular_amplitude), angular.cos_nodes,
                                    angular.cos_weights, angular.n_azimuth).T
    raw = raw * grid.sqrt_mu
    out = raw
    moments = collision_invariant_moments(raw, grid)
    if conservative:
        E = invariant_basis(grid)
        out = raw - macro_coefficients(raw, grid) @ E
    out = out.reshape(np.shape(f) if not single else (grid.size,))
    if return_raw:
        return out, moments
    return out


def collision_invariant_moments(q, grid):
    """sum_i w_i sqrt(mu_i) {1, v, |v|^2} q_i for each row of q."""
    V = grid.nodes
    sm = grid.sqrt_mu
    W = np.vstack([sm, V.T * sm, np.sum(V * V, axis=1) * sm]) * grid.quad_weights
    return np.asarray(q) @ W.T


def gamma_bgk(grid, nu0, f, conservative=True):
    """Quadratic part of the BGK relaxation expanded around mu.

    With F = mu + eps sqrt(mu) f the local Maxwellian of F is
    mu (1 + eps phi1 + eps^2 (phi2 + phi1^2/2) + ...), where phi1 is the
    hydrodynamic part of f/sqrt(mu); Gamma is nu0 sqrt(mu) (phi2 + phi1^2/2).
    Depends on f only through its moments (a, b, c).
    """
    m, _ = project_P(f, grid)
    a = np.asarray(m.a)[..., None]
    b = np.asarray(m.b)
    c = np.asarray(m.c)[..., None]
    V = grid.nodes
    v2 = np.sum(V * V, axis=1)
    vb = b @ V.T
    bb = np.sum(b * b, axis=-1)[..., None]
    phi1 = a + vb + 0.5 * c * (v2 - 3)
    phi2 = (-0.5 * a * a + 1.5 * a * c + 0.75 * c * c
            - 0.5 * v2 * (a * c + c * c + bb / 3) - (a + c) * vb)
    out = nu0 * grid.sqrt_mu * (phi2 + 0.5 * phi1 * phi1)
    if conservative:
        out = out - macro_coefficients(out, grid) @ invariant_basis(grid)
    return out


def local_maxwellian_ratio(grid, rho, u, T):
    """M[rho, u, T](v) / mu(v) on the nodes (used as an oracle for gamma_bgk)."""
    V = grid.nodes
    d = V - np.asarray(u)
    return rho * T ** -1.5 * np.exp(-0.5 * np.sum(d * d, axis=1) / T + 0.5 * np.sum(V * V, axis=1))


def symmetry_orbits(grid, axis=0):
    """Orbits of the node set under the symmetries fixing the v_axis direction.

    The group is generated by v_j -> -v_j and v_j <-> v_k for the two
    transverse components.  Returns a sparse matrix S (n x n_orbits) with
    orthonormal columns, each the normalized indicator of one orbit.
    """
    N = grid.per_axis_count
    idx = np.arange(grid.size).reshape(N, N, N)
    idx = np.moveaxis(idx, axis, 0)
    # transverse labels folded by reflection then sorted
    fold = np.minimum(np.arange(N), N - 1 - np.arange(N))
    I, J, K = np.meshgrid(np.arange(N), fold, fold, indexing="ij")
    lo = np.minimum(J, K)
    hi = np.maximum(J, K)
    half = N // 2
    label = (I * half + lo) * half + hi
    lab = np.empty(grid.size, dtype=np.int64)
    lab[idx.reshape(-1)] = label.reshape(-1)
    uniq, inv, counts = np.unique(lab, return_inverse=True, return_counts=True)
    vals = 1.0 / np.sqrt(counts[inv])
    S = sparse.csr_matrix((vals, (np.arange(grid.size), inv)), shape=(grid.size, len(uniq)))
    return S
