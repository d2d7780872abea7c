"""Fourier-mode linearized Vlasov-Poisson-Boltzmann semigroup.

For a fixed wavenumber k the linearized system reads

    d/dt f = -(i/eps) (v.k) (f + a/|k|^2 sqrt(mu)) - (1/eps^2) L f,

a = <f, sqrt(mu)>.  It dissipates the mode energy
E(f) = ||f||^2 + |a|^2 / |k|^2.  Whole-space norms are recovered by a
radial quadrature in |k| for isotropic data.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from .kinetic import symmetry_orbits

TOL_MONO = 1e-8


class IntegratorError(RuntimeError):
    """Mode energy grew beyond tolerance during a step."""


@dataclass(eq=False)
class ModeOperator:
    """Dense generator of one Fourier mode.

    ``matrix`` acts on coefficient vectors y with f = basis @ y (basis is the
    identity when no symmetry reduction is used).  ``transport`` and
    ``collision`` are the parts scaling like 1/eps and 1/eps^2.
    """
    k: np.ndarray
    eps: float
    transport: np.ndarray
    collision: np.ndarray
    sqrt_mu: np.ndarray
    weight: float
    basis: object = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def matrix(self):
        if "matrix" not in self._cache:
            self._cache["matrix"] = self.transport / self.eps + self.collision / self.eps ** 2
        return self._cache["matrix"]

    @property
    def size(self):
        return self.transport.shape[0]

    @property
    def k2(self):
        return float(np.dot(self.k, self.k))

    def apply(self, y):
        return self.matrix @ y

    def density(self, y):
        return self.weight * (self.sqrt_mu @ y)

    def energy(self, y):
        y = np.asarray(y)
        a = self.density(y)
        return float(self.weight * np.vdot(y, y).real + abs(a) ** 2 / self.k2)

    def expand(self, y):
        """Full velocity profile from reduced coefficients."""
        return y if self.basis is None else self.basis @ y

    def reduce(self, f):
        return f if self.basis is None else self.basis.T @ f


def _dense(A):
    return A.toarray() if sparse.issparse(A) else np.asarray(A)


def assemble_mode_operator(op, k, eps, grid, basis=None):
    """Generator of the mode system for wavenumber k.

    ``basis`` (n x m, orthonormal columns) restricts the operator to an
    invariant subspace, e.g. the symmetry orbits about k.
    """
    k = np.asarray(k, dtype=float).reshape(3)
    k2 = float(k @ k)
    if not k2 > 0:
        raise ValueError("k = 0 is excluded (the Poisson term is singular)")
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    w = grid.cell_volume
    s = grid.sqrt_mu
    vk = grid.nodes @ k
    L = _dense(op.matrix)
    if basis is not None:
        S = basis
        vk_r = _dense(S.T @ sparse.diags(vk) @ S) if sparse.issparse(S) else S.T @ (vk[:, None] * S)
        s_r = np.asarray(S.T @ s).ravel()
        L_r = np.asarray(S.T @ (S.T @ L.T).T)
    else:
        vk_r = np.diag(vk)
        s_r = s
        L_r = L
    # transport plus field: -i D (I + s s^T w / |k|^2)
    T = -1j * (vk_r + (vk_r @ s_r)[:, None] * (w / k2) * s_r[None, :])
    return ModeOperator(k=k, eps=float(eps), transport=T, collision=-L_r.astype(complex),
                        sqrt_mu=s_r, weight=w, basis=basis)


def radial_basis(grid, axis=0):
    """Symmetry-orbit basis for k along one axis (isotropic data)."""
    return symmetry_orbits(grid, axis)


def mode_factory(op, grid, eps, reduced=True, axis=0):
    """k |-> ModeOperator with k = |k| e_axis, sharing one orbit basis."""
    S = radial_basis(grid, axis) if reduced else None
    e = np.zeros(3)
    e[axis] = 1.0

    def make(kmag):
        return assemble_mode_operator(op, kmag * e, eps, grid, basis=S)
    return make


# ---------------------------------------------------------------------------
# time integration

def _energy_factor(mop):
    """G^(1/2) and G^(-1/2) for the energy form y^H G y."""
    n = mop.size
    q = mop.sqrt_mu * math.sqrt(mop.weight)
    qq = float(q @ q)
    u = q / math.sqrt(qq)
    lam = 1.0 + qq / mop.k2          # eigenvalue of I + q q^T / |k|^2 along u
    sw = math.sqrt(mop.weight)
    Gh = sw * (np.eye(n) + (math.sqrt(lam) - 1.0) * np.outer(u, u))
    Ghi = (np.eye(n) + (1.0 / math.sqrt(lam) - 1.0) * np.outer(u, u)) / sw
    return Gh, Ghi


def _check_monotone(energies, tol):
    e0 = energies[0]
    if e0 == 0:
        return
    jumps = np.diff(energies)
    bad = np.flatnonzero(jumps > tol * e0)
    if bad.size:
        i = int(bad[0])
        raise IntegratorError(f"mode energy increased by {jumps[i] / e0:.3e} (relative) "
                              f"at sample {i + 1}")


def _exact_propagate(mop, y0, t):
    """exp(t B) y0 by eigendecomposition of the energy-symmetrized generator."""
    Gh, Ghi = _energy_factor(mop)
    A = Gh @ mop.matrix @ Ghi
    lam, V = linalg.eig(A)
    c = linalg.solve(V, Gh @ y0)
    out = np.empty((len(t), mop.size), dtype=complex)
    for i, ti in enumerate(t):
        out[i] = Ghi @ (V @ (np.exp(lam * ti) * c))
    return out


def _collision_propagator(mop, dt):
    """exp(dt C) for the collision part, which is real symmetric nonpositive."""
    if "coll_eig" not in mop._cache:
        C = mop.collision.real
        mop._cache["coll_eig"] = linalg.eigh(0.5 * (C + C.T))
    lam, V = mop._cache["coll_eig"]
    return (V * np.exp(dt * lam / mop.eps ** 2)) @ V.T


def split_step_matrix(mop, dt):
    """One Strang step: Cayley transport/field half steps around an exact collision step.

    Both factors are contractions of the mode energy; the collision factor
    damps stiff modes completely as dt / eps^2 grows.
    """
    n = mop.size
    I = np.eye(n)
    T = mop.transport / mop.eps
    half = linalg.solve(I - 0.25 * dt * T, I + 0.25 * dt * T)
    return half @ _collision_propagator(mop, dt) @ half


def evolve_mode(mop, fhat0, t_grid, method="exact", dt=None, tol_mono=TOL_MONO,
                return_energy=False):
    """Trajectory of one mode at the requested times.

    method "exact" uses the matrix exponential (eigendecomposition); method
    "split" takes Strang steps of size at most dt, each of which is a
    contraction of the mode energy.  Energy growth beyond tol_mono (relative
    to the initial energy) between samples or steps raises IntegratorError.
    """
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0 or t[0] != 0:
        raise ValueError("t_grid must start at 0")
    if np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be increasing")
    y0 = np.asarray(fhat0, dtype=complex)
    if y0.shape != (mop.size,):
        y0 = np.asarray(mop.reduce(y0), dtype=complex)
    if not np.any(y0):
        out = np.zeros((t.size, mop.size), dtype=complex)
        return (out, np.zeros(t.size)) if return_energy else out
    if method == "exact":
        traj = _exact_propagate(mop, y0, t)
        energies = np.array([mop.energy(y) for y in traj])
    elif method == "split":
        if dt is None:
            dt = 0.1 * mop.eps
        traj = np.empty((t.size, mop.size), dtype=complex)
        traj[0] = y0
        energies = [mop.energy(y0)]
        cache = {}
        y = y0
        for i in range(1, t.size):
            span = t[i] - t[i - 1]
            m = max(1, int(math.ceil(span / dt - 1e-12)))
            h = span / m
            key = round(h, 14)
            if key not in cache:
                cache[key] = split_step_matrix(mop, h)
            Phi = cache[key]
            for _ in range(m):
                y = Phi @ y
                e = mop.energy(y)
                if e > energies[-1] + tol_mono * energies[0]:
                    raise IntegratorError(f"mode energy increased by "
                                          f"{(e - energies[-1]) / energies[0]:.3e} (relative)")
                energies.append(e)
            traj[i] = y
        energies = np.array(energies)
    else:
        raise ValueError(f"unknown method {method!r}")
    _check_monotone(energies, tol_mono)
    if return_energy:
        return traj, energies
    return traj


# ---------------------------------------------------------------------------
# whole-space synthesis

@dataclass(frozen=True)
class RadialKGrid:
    nodes: np.ndarray
    weights: np.ndarray


def radial_k_grid(k_min=1e-3, k_max=8.0, n=48):
    """Log-spaced radial nodes with weights 4 pi k^2 dk (trapezoid in log k)."""
    if not 0 < k_min < k_max:
        raise ValueError("need 0 < k_min < k_max")
    s = np.linspace(math.log(k_min), math.log(k_max), n)
    k = np.exp(s)
    ds = np.full(n, s[1] - s[0])
    ds[0] *= 0.5
    ds[-1] *= 0.5
    return RadialKGrid(nodes=k, weights=4 * math.pi * k ** 3 * ds)


@dataclass(frozen=True)
class DecaySeries:
    times: np.ndarray
    values: np.ndarray
    label: str

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if t.shape != y.shape or t.ndim != 1:
            raise ValueError("times and values must be 1-d of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(y)) or np.any(y < 0):
            raise ValueError("values must be finite and nonnegative")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)

    def sqrt(self):
        return DecaySeries(self.times, np.sqrt(self.values), self.label)


@dataclass(frozen=True)
class RateFit:
    exponent: float
    intercept: float
    residual: float
    window: tuple
    n_samples: int


def fit_decay_exponent(series, window):
    """Least squares fit of log y = alpha log(1+t) + beta on the window."""
    t_lo, t_hi = window
    t, y = series.times, series.values
    if t_lo < t[0] or t_hi > t[-1]:
        raise ValueError("window outside the series range")
    sel = (t >= t_lo) & (t <= t_hi)
    if sel.sum() < 8:
        raise ValueError(f"window holds {int(sel.sum())} samples, need at least 8")
    if np.any(y[sel] <= 0):
        raise ValueError("non-positive values in the fit window")
    X = np.column_stack([np.log1p(t[sel]), np.ones(int(sel.sum()))])
    coef, *_ = np.linalg.lstsq(X, np.log(y[sel]), rcond=None)
    res = float(np.sqrt(np.mean((X @ coef - np.log(y[sel])) ** 2)))
    return RateFit(float(coef[0]), float(coef[1]), res, (float(t_lo), float(t_hi)), int(sel.sum()))


def synthesize_whole_space_norms(kgrid, initial_profile, mop_factory, t_grid, method="exact",
                                 dt=None):
    """Squared whole-space norms of f, grad_x f and grad_x phi over time.

    initial_profile(kmag) returns the full velocity profile of f_hat_0;
    mop_factory(kmag) returns the ModeOperator.  Values are the radial
    k-integrals of ||f_hat||^2, |k|^2 ||f_hat||^2 and |a_hat|^2 / |k|^2
    (Plancherel constants omitted).
    """
    t = np.asarray(t_grid, dtype=float)
    if kgrid.nodes[0] > 1e-2:
        warnings.warn("k_min > 1e-2: algebraic decay is not resolved", RuntimeWarning)
    l2 = np.zeros(t.size)
    grad = np.zeros(t.size)
    gphi = np.zeros(t.size)
    for kmag, wk in zip(kgrid.nodes, kgrid.weights):
        mop = mop_factory(kmag)
        f0 = np.asarray(initial_profile(kmag))
        if not np.any(f0):
            continue
        traj = evolve_mode(mop, mop.reduce(f0), t, method=method, dt=dt)
        nf = mop.weight * np.sum(np.abs(traj) ** 2, axis=1)
        a = mop.weight * (traj @ mop.sqrt_mu)
        l2 += wk * nf
        grad += wk * kmag ** 2 * nf
        gphi += wk * np.abs(a) ** 2 / kmag ** 2
    return {"L2": DecaySeries(t, l2, "L2"),
            "grad": DecaySeries(t, grad, "grad"),
            "grad_phi": DecaySeries(t, gphi, "grad_phi")}


def ball_profile(grid, shape="thermal", k_cut=1.0):
    """Isotropic compact initial data chi(|k| <= k_cut) g(v) sqrt(mu).

    shape "thermal" uses g = (|v|^2 - 3)/2, which carries no charge;
    shape "density" uses g = 1.
    """
    v2 = np.sum(grid.nodes ** 2, axis=1)
    if shape == "thermal":
        g = 0.5 * (v2 - 3.0) * grid.sqrt_mu
    elif shape == "density":
        g = grid.sqrt_mu.copy()
    else:
        raise ValueError(f"unknown profile shape {shape!r}")

    def profile(kmag):
        return g if kmag <= k_cut else np.zeros_like(g)
    return profile

