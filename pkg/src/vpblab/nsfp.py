"""Incompressible Navier-Stokes-Fourier-Poisson reference solver.

    d_t u + u.grad u - lam Lap u + grad p = rho grad theta,   div u = 0
    d_t g + u.grad g - (5/2) kappa Lap theta = 0,             g = (3/2) theta - rho
    Lap(rho + theta) = rho,   grad phi = -grad(rho + theta)

on the periodic box of a SpatialGrid.  g is the evolved scalar; (rho, theta,
phi) are recovered from it mode by mode, so the elliptic constraint holds at
every step.  Time stepping is second-order Runge-Kutta in integrating-factor
form: diffusion (including the theta-recovery factor) is integrated exactly.
"""
import math
from dataclasses import dataclass, replace

import numpy as np

from . import kinetic
from .kinetic import TOL_CONS


@dataclass(frozen=True)
class TransportCoefficients:
    lam: float
    kappa: float

    def __post_init__(self):
        if not (self.lam > 0 and self.kappa > 0):
            raise ValueError(f"transport coefficients must be positive: {self}")


def compute_transport_coefficients(op, grid):
    """lam = (1/10) sum_ij <A_ij, L^-1 A_ij>, kappa = (2/15) sum_i <B_i, L^-1 B_i>.

    A_ij = (v_i v_j - delta_ij |v|^2/3) sqrt(mu), B_i = v_i (|v|^2 - 5)/2 sqrt(mu).
    On a truncated grid the sources are not exactly microscopic; their
    discrete macro part (a truncation-size residue) is removed first.
    """
    A, B = kinetic.burnett_sources(grid)
    A = {key: kinetic.micro_part(src, grid) for key, src in A.items()}
    B = [kinetic.micro_part(src, grid) for src in B]
    lam = 0.0
    for (i, j), src in A.items():
        mult = 1.0 if i == j else 2.0
        lam += mult * grid.inner(src, kinetic.invert_L_micro(op, src))
    kap = sum(grid.inner(src, kinetic.invert_L_micro(op, src)) for src in B)
    return TransportCoefficients(lam=float(lam / 10), kappa=float(2 * kap / 15))


# ---------------------------------------------------------------------------
# spectral helpers

def _k_vectors(sgrid, nyquist=False):
    """Wavevector components as a (3, *shape) array.

    First derivatives of real fields carry no Nyquist component, so by
    default that entry is zero; nyquist=True keeps it (for |k|^2 and masks).
    """
    ks = sgrid.wavenumbers()
    shape = sgrid.shape
    kn = math.pi / sgrid.spacing
    out = np.zeros((3,) + shape)
    for i, k in enumerate(ks):
        if not nyquist:
            k = np.where(np.abs(k) == kn, 0.0, k)
        out[i] = np.broadcast_to(k, shape)
    return out


def _k_squared(sgrid):
    return np.broadcast_to(sgrid.k_squared(), sgrid.shape).copy()


def _fft(u, nd):
    return np.fft.fftn(u, axes=tuple(range(-nd, 0)))


def _ifft(u, nd):
    return np.fft.ifftn(u, axes=tuple(range(-nd, 0))).real


def _leray_hat(uh, K):
    k2 = np.sum(K * K, axis=0)
    kdotu = np.sum(K * uh, axis=0)
    safe = np.where(k2 > 0, k2, 1.0)
    corr = np.where(k2 > 0, kdotu / safe, 0.0)
    return uh - K * corr


def leray_project(u, sgrid):
    """Divergence-free part u - grad Lap^-1 div u; the mean is untouched."""
    u = np.asarray(u, dtype=float)
    nd = sgrid.dim
    return _ifft(_leray_hat(_fft(u, nd), _k_vectors(sgrid)), nd)


def divergence(u, sgrid):
    nd = sgrid.dim
    K = _k_vectors(sgrid)
    return _ifft(np.sum(1j * K * _fft(u, nd), axis=0), nd)


def _recover_hat(gh, k2):
    theta = gh * (1 + k2) / (1.5 + 2.5 * k2)
    rho = 1.5 * theta - gh
    phi = -(rho + theta)
    return rho, theta, phi


def recover_rho_theta(g, sgrid, tol=TOL_CONS):
    """(rho, theta, phi) from g = (3/2) theta - rho under Lap(rho + theta) = rho."""
    g = np.asarray(g, dtype=float)
    scale = float(np.sqrt(np.mean(g * g)))
    mean = float(np.mean(g))
    if abs(mean) > tol * max(scale, 1e-300) and abs(mean) > 1e-300:
        raise ValueError(f"g has nonzero mean {mean:.3e}")
    nd = sgrid.dim
    k2 = _k_squared(sgrid)
    gh = _fft(g, nd)
    gh.flat[0] = 0.0
    rho, theta, phi = _recover_hat(gh, k2)
    return _ifft(rho, nd), _ifft(theta, nd), _ifft(phi, nd)


def constraint_residual(rho, theta, sgrid):
    """max mode-wise |-|k|^2 (rho + theta)_hat - rho_hat| relative to max |rho_hat|, theta_hat."""
    nd = sgrid.dim
    k2 = _k_squared(sgrid)
    rh = _fft(rho, nd)
    th = _fft(theta, nd)
    r = np.abs(-k2 * (rh + th) - rh)
    r.flat[0] = 0.0
    scale = max(float(np.max(np.abs(rh))), float(np.max(np.abs(th))))
    return float(np.max(r) / scale) if scale > 0 else float(np.max(r))


@dataclass
class FluidState:
    rho: np.ndarray
    u: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    time: float
    sgrid: object

    @property
    def g(self):
        return 1.5 * self.theta - self.rho

    def copy(self):
        return replace(self, rho=self.rho.copy(), u=self.u.copy(), theta=self.theta.copy(),
                       phi=self.phi.copy())


def fluid_state(sgrid, u0, rho0=None, theta0=None, time=0.0):
    """Initial fluid state: u = P u0, g0 = (3/2)theta0 - rho0, (rho, theta) re-derived."""
    shape = sgrid.shape
    u = leray_project(np.asarray(u0, dtype=float).reshape((3,) + shape), sgrid)
    rho0 = np.zeros(shape) if rho0 is None else np.asarray(rho0, float)
    theta0 = np.zeros(shape) if theta0 is None else np.asarray(theta0, float)
    rho, theta, phi = recover_rho_theta(1.5 * theta0 - rho0, sgrid)
    return FluidState(rho=rho, u=u, theta=theta, phi=phi, time=float(time), sgrid=sgrid)


class _Stepper:
    """Integrating-factor Heun step for (u_hat, g_hat)."""

    def __init__(self, sgrid, coeffs, forcing=True, dealias=True):
        self.sgrid = sgrid
        self.forcing = forcing
        self.nd = sgrid.dim
        self.K = _k_vectors(sgrid)
        self.k2 = _k_squared(sgrid)
        self.coeffs = coeffs
        self.rate_u = coeffs.lam * self.k2
        self.rate_g = 2.5 * coeffs.kappa * self.k2 * (1 + self.k2) / (1.5 + 2.5 * self.k2)
        if dealias:
            Kf = _k_vectors(sgrid, nyquist=True)
            kmax = np.max(np.abs(Kf))
            self.mask = np.all(np.abs(Kf) <= (2.0 / 3.0) * kmax + 1e-12, axis=0)
        else:
            self.mask = np.ones(self.k2.shape, dtype=bool)

    def nonlinear(self, uh, gh):
        nd = self.nd
        K = self.K
        u = _ifft(uh, nd)
        grad_g = _ifft(1j * K * gh, nd)
        adv = np.empty_like(u)
        for i in range(3):
            grad_ui = _ifft(1j * K * uh[i], nd)
            adv[i] = np.sum(u * grad_ui, axis=0)
        if self.forcing:
            rho_h, theta_h, _ = _recover_hat(gh, self.k2)
            adv -= _ifft(rho_h, nd) * _ifft(1j * K * theta_h, nd)
        Nu = _fft(-adv, nd) * self.mask
        Ng = _fft(-np.sum(u * grad_g, axis=0), nd) * self.mask
        Nu = _leray_hat(Nu, K)
        Ng.flat[0] = 0.0
        return Nu, Ng

    def step(self, uh, gh, dt):
        Eu = np.exp(-self.rate_u * dt)
        Eg = np.exp(-self.rate_g * dt)
        Nu0, Ng0 = self.nonlinear(uh, gh)
        u1 = Eu * (uh + dt * Nu0)
        g1 = Eg * (gh + dt * Ng0)
        Nu1, Ng1 = self.nonlinear(u1, g1)
        un = Eu * uh + 0.5 * dt * (Eu * Nu0 + Nu1)
        gn = Eg * gh + 0.5 * dt * (Eg * Ng0 + Ng1)
        return _leray_hat(un, self.K), gn


def _state_from_hat(uh, gh, time, sgrid, stepper):
    nd = sgrid.dim
    rho_h, theta_h, phi_h = _recover_hat(gh, stepper.k2)
    return FluidState(rho=_ifft(rho_h, nd), u=_ifft(uh, nd), theta=_ifft(theta_h, nd),
                      phi=_ifft(phi_h, nd), time=time, sgrid=sgrid)


def nsfp_step(state, coeffs, dt, forcing=True):
    st = _Stepper(state.sgrid, coeffs, forcing)
    nd = state.sgrid.dim
    uh, gh = st.step(_fft(state.u, nd), _fft(state.g, nd), dt)
    out = _state_from_hat(uh, gh, state.time + dt, state.sgrid, st)
    if not (np.all(np.isfinite(out.u)) and np.all(np.isfinite(out.theta))):
        raise FloatingPointError("non-finite values in NSFP step")
    return out


@dataclass
class FluidRun:
    times: np.ndarray
    states: list
    max_divergence: float
    max_constraint_residual: float

    def series(self, fn):
        return np.array([fn(s) for s in self.states])


def nsfp_run(initial, coeffs, dt, t_end, record_every=1, forcing=True):
    """Advance with fixed dt; records states every record_every steps (and the last)."""
    n_steps = int(round(t_end / dt))
    if abs(n_steps * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise ValueError("t_end must be an integer multiple of dt")
    sg = initial.sgrid
    st = _Stepper(sg, coeffs, forcing)
    nd = sg.dim
    uh = _fft(initial.u, nd)
    gh = _fft(initial.g, nd)
    states = [initial.copy()]
    max_div = float(np.max(np.abs(divergence(initial.u, sg))))
    max_res = constraint_residual(initial.rho, initial.theta, sg)
    for n in range(1, n_steps + 1):
        uh, gh = st.step(uh, gh, dt)
        if n % record_every == 0 or n == n_steps:
            s = _state_from_hat(uh, gh, initial.time + n * dt, sg, st)
            if not (np.all(np.isfinite(s.u)) and np.all(np.isfinite(s.theta))):
                raise FloatingPointError(f"non-finite values at step {n}")
            max_div = max(max_div, float(np.max(np.abs(divergence(s.u, sg)))))
            max_res = max(max_res, constraint_residual(s.rho, s.theta, sg))
            states.append(s)
    times = np.array([s.time for s in states])
    return FluidRun(times, states, max_div, max_res)


def kinetic_energy(state):
    return 0.5 * float(np.sum(state.u * state.u)) * state.sgrid.cell_volume


def shear_decay_factor(coeffs, kmag, t):
    return math.exp(-coeffs.lam * kmag ** 2 * t)
