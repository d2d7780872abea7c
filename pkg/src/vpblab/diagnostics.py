"""Functionals and checks evaluated on computed states and runs.

Derivative conventions: spectral in x, second-order centred differences in v
(one-sided at the edges of the velocity box).  Norms are the corresponding
discrete sums.
"""
import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kinetic
from .kinetic import PotentialModel, collision_frequency_radial
from .spectral import RateFit, fit_decay_exponent  # noqa: F401  (re-exported)


# ---------------------------------------------------------------------------
# derivatives

def _x_derivative(f, sgrid, axis, order=1):
    """d^order/dx_axis^order of an array whose leading axes are x."""
    nd = sgrid.dim
    if axis >= nd:
        return np.zeros_like(f)
    k = 2 * math.pi * np.fft.fftfreq(sgrid.per_axis_count, d=sgrid.spacing)
    shape = [1] * f.ndim
    shape[axis] = -1
    fac = (1j * k.reshape(shape)) ** order
    if order % 2 == 1:
        # the Nyquist mode has no odd derivative of a real field
        fac = fac.copy()
        idx = [0] * f.ndim
        idx[axis] = sgrid.per_axis_count // 2
        fac[tuple(idx)] = 0.0
    return np.fft.ifft(np.fft.fft(f, axis=axis) * fac, axis=axis).real


def _v_derivative(f, vgrid, axis):
    """Centred difference along velocity axis (0, 1, 2) on the last axis of f."""
    N = vgrid.per_axis_count
    xs = f.shape[:-1]
    F = f.reshape(xs + (N, N, N))
    d = np.gradient(F, vgrid.spacing, axis=len(xs) + axis, edge_order=2)
    return d.reshape(f.shape)


def _multi_indices(n_x, n_v, order):
    """(alpha, beta) count vectors with |alpha| + |beta| <= order."""
    out = []
    nvar = n_x + n_v
    for total in range(order + 1):
        for combo in itertools.combinations_with_replacement(range(nvar), total):
            alpha = [0] * n_x
            beta = [0] * 3
            for c in combo:
                if c < n_x:
                    alpha[c] += 1
                else:
                    beta[c - n_x] += 1
            out.append((tuple(alpha), tuple(beta)))
    return out


def mixed_derivative(f, sgrid, vgrid, alpha, beta):
    g = f
    for ax, n in enumerate(alpha):
        if n:
            g = _x_derivative(g, sgrid, ax, n)
    for ax, n in enumerate(beta):
        for _ in range(n):
            g = _v_derivative(g, vgrid, ax)
    return g


def _label(alpha, beta):
    parts = [f"x{i + 1}^{n}" for i, n in enumerate(alpha) if n]
    parts += [f"v{i + 1}^{n}" for i, n in enumerate(beta) if n]
    return "*".join(parts) if parts else "0"


# ---------------------------------------------------------------------------
# energy functionals

@dataclass
class EnergyReport:
    time: float
    E_hard: float = 0.0
    Etilde_hard: float = 0.0
    E_soft_ell: float = 0.0
    D_hard: float = 0.0
    D_soft_ell: float = 0.0
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("E_hard", "Etilde_hard", "E_soft_ell", "D_hard", "D_soft_ell"):
            v = getattr(self, k)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{k} = {v} is not finite and nonnegative")


class _Norms:
    """Squared weighted norms of mixed derivatives of one state, with caching."""

    def __init__(self, state):
        self.state = state
        self.sg = state.sgrid
        self.vg = state.vgrid
        self.dvol = self.sg.cell_volume * self.vg.cell_volume
        self.f = state.f
        self.Pf = kinetic.project_P(state.f, self.vg)[1]
        self.micro = self.f - self.Pf
        self._cache = {}

    def deriv(self, which, alpha, beta):
        key = (which, alpha, beta)
        if key not in self._cache:
            base = {"f": self.f, "P": self.Pf, "micro": self.micro}[which]
            self._cache[key] = mixed_derivative(base, self.sg, self.vg, alpha, beta)
        return self._cache[key]

    def sq(self, which, alpha, beta, weight=None):
        d = self.deriv(which, alpha, beta)
        if weight is not None:
            d = d * weight
        return float(np.sum(d * d) * self.dvol)

    def indices(self, order):
        return _multi_indices(self.sg.dim, 3, order)

    def field_sq(self, order_lo, order_hi):
        """sum over lo <= |alpha| <= hi of ||d^alpha grad phi||^2."""
        E = self.state.grad_phi()
        tot = 0.0
        for total in range(order_lo, order_hi + 1):
            for combo in itertools.combinations_with_replacement(range(self.sg.dim), total):
                g = E
                for ax in combo:
                    g = _x_derivative(g, self.sg, ax + 1)
                tot += float(np.sum(g * g) * self.sg.cell_volume)
        return tot


def energy_hard(state, model=None, nu=None):
    """Hard-potential functionals.

    E_hard is the norm sum ||f||_{H^2_{x,v}} + ||grad phi||_{H^2_x} + ||w f||_{H^1_x L^2_v}
    (homogeneous of degree 1).  Etilde_hard and D_hard are squared sums
    (degree 2); D_hard needs nu on the velocity nodes (defaults to the hard
    sphere grid frequency if a model is given, else it is left at 0).
    """
    model = model or PotentialModel(1.0)
    nm = _Norms(state)
    vg = nm.vg
    w = kinetic.weight_w(model, vg.nodes)
    comps = {}
    h2 = 0.0
    for a, b in nm.indices(2):
        v = nm.sq("f", a, b)
        comps["f:" + _label(a, b)] = v
        h2 += v
    field_h2 = nm.field_sq(0, 2)
    w_h1 = sum(nm.sq("f", a, b, w) for a, b in nm.indices(1) if sum(b) == 0)
    comps["grad_phi:H2"] = field_h2
    comps["w f:H1xL2v"] = w_h1
    E = math.sqrt(h2) + math.sqrt(field_h2) + math.sqrt(w_h1)

    # instant high-order energy
    et = 0.0
    for a, b in nm.indices(2):
        if sum(b) == 0 and 1 <= sum(a) <= 2:
            et += nm.sq("f", a, b)
    et += nm.field_sq(1, 2)
    et += sum(nm.sq("micro", a, b) for a, b in nm.indices(2))
    w_micro_h1 = sum(nm.sq("micro", a, b, w) for a, b in nm.indices(1) if sum(b) == 0)
    et += w_micro_h1

    D = 0.0
    if nu is not None:
        D = _dissipation_common(nm, state.eps, nu)
        sn = np.sqrt(nu)
        D += sum(nm.sq("micro", a, b, w * sn) for a, b in nm.indices(1)
                 if sum(b) == 0) / state.eps ** 2
    return EnergyReport(time=state.time, E_hard=E, Etilde_hard=et, D_hard=D, components=comps)


def _dissipation_common(nm, eps, nu, vel_weight=None, ell_terms=None):
    """(1/eps^2)||micro||^2_{H^2(nu)} + ||grad_x P f||^2_{H^1} + ||grad^2 phi||^2_{H^1}."""
    sn = np.sqrt(nu)
    D = 0.0
    for a, b in nm.indices(2):
        wt = sn if vel_weight is None else sn * vel_weight ** sum(b)
        D += nm.sq("micro", a, b, wt) / eps ** 2
        if sum(a) >= 1:
            D += nm.sq("P", a, b)
    D += nm.field_sq(1, 2)
    return D


def energy_soft(state, wspec, model, nu=None):
    """Soft-potential instant energy E_soft_ell and dissipation D_soft_ell (squared sums).

    The second weighted family runs over 0 <= |alpha| <= 1 with weight
    w^(|beta| - ell); the last terms are eps ||w^-ell grad_x^2 f||^2 and
    (1/eps) ||w^-ell grad_x^2 (I-P) f||^2_nu.
    """
    nm = _Norms(state)
    vg = nm.vg
    w = kinetic.weight_w(model, vg.nodes)
    eps = state.eps
    ell = wspec.ell
    comps = {}
    E = 0.0
    for a, b in nm.indices(2):
        v = nm.sq("f", a, b, w ** sum(b))
        comps["w^|b| f:" + _label(a, b)] = v
        E += v
    E += nm.field_sq(0, 2)
    for a, b in nm.indices(2):
        if sum(a) <= 1:
            E += nm.sq("f", a, b, w ** (sum(b) - ell))
    second_x = [(a, b) for a, b in nm.indices(2) if sum(a) == 2]
    sx = sum(nm.sq("f", a, b, w ** (-ell)) for a, b in second_x)
    comps["eps w^-ell dxx f"] = eps * sx
    E += eps * sx

    D = 0.0
    if nu is not None:
        sn = np.sqrt(nu)
        D = _dissipation_common(nm, eps, nu, vel_weight=w)
        for a, b in nm.indices(2):
            if sum(a) <= 1:
                D += nm.sq("micro", a, b, sn * w ** (sum(b) - ell)) / eps ** 2
        D += sum(nm.sq("micro", a, b, sn * w ** (-ell)) for a, b in second_x) / eps
    return EnergyReport(time=state.time, E_soft_ell=E, D_soft_ell=D, components=comps)


def dissipation_soft(state, wspec, model, nu):
    return energy_soft(state, wspec, model, nu)


# ---------------------------------------------------------------------------
# sup norms

def weighted_sup_norm(state, wspec, order=0):
    """max over nodes of |w_theta(t, v) d^alpha_beta f| for |alpha| + |beta| <= order."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    vg = state.vgrid
    wt = kinetic.weight_w_theta(wspec, state.time, vg.nodes)
    best = 0.0
    for a, b in _multi_indices(state.sgrid.dim, 3, order):
        d = mixed_derivative(state.f, state.sgrid, vg, a, b)
        best = max(best, float(np.max(np.abs(d * wt))))
    return best


# ---------------------------------------------------------------------------
# macroscopic balance laws

def macro_balance_residual(run):
    """Residuals of the mass and momentum balance laws along a recorded run.

        d_t a + (1/eps) div b = 0
        d_t b_i + (1/eps) d_j <f, v_i v_j sqrt mu> + (1/eps) d_i phi + a d_i phi = 0

    Time derivatives are centred differences of the records (uniform stride
    required), x-derivatives are spectral.  Returns (times, mass residual,
    momentum residual) as L^2_x norms at the interior records.
    """
    states = run.states
    if len(states) < 3:
        raise ValueError("need at least 3 recorded states")
    t = np.array([s.time for s in states])
    dt = np.diff(t)
    if np.max(np.abs(dt - dt[0])) > 1e-9 * dt[0]:
        raise ValueError("recorded times must be uniformly spaced")
    h = dt[0]
    if h > 0.1 * states[0].eps:
        warnings.warn("recording stride is coarse compared to eps; the time-difference "
                      "error may dominate", RuntimeWarning)
    vg = states[0].vgrid
    sg = states[0].sgrid
    V = vg.nodes
    wq = vg.quad_weights * vg.sqrt_mu

    def moments(s):
        a = s.f @ wq
        b = s.f @ (V * wq[:, None])
        return a, b

    def flux(s):
        # momentum flux <f, v_i v_j sqrt mu>
        return np.einsum("...n,ni,nj->...ij", s.f, V * wq[:, None], V)

    res_a, res_b = [], []
    for n in range(1, len(states) - 1):
        s = states[n]
        a_p, b_p = moments(states[n + 1])
        a_m, b_m = moments(states[n - 1])
        a, b = moments(s)
        dta = (a_p - a_m) / (2 * h)
        dtb = (b_p - b_m) / (2 * h)
        div_b = sum(_x_derivative(b[..., i], sg, i) for i in range(sg.dim))
        ra = dta + div_b / s.eps
        Pi = flux(s)
        E = s.grad_phi()
        rb = dtb.copy()
        for i in range(3):
            div_flux = sum(_x_derivative(Pi[..., j, i], sg, j) for j in range(sg.dim))
            rb[..., i] += div_flux / s.eps + E[i] / s.eps + a * E[i]
        dx = sg.cell_volume
        res_a.append(math.sqrt(float(np.sum(ra * ra) * dx)))
        res_b.append(math.sqrt(float(np.sum(rb * rb) * dx)))
    return t[1:-1], np.array(res_a), np.array(res_b)


# ---------------------------------------------------------------------------
# nu tilde

@dataclass
class NuTildeCheck:
    min_ratio: float
    worst_point: tuple
    params: dict
    n_samples: int


def varrho(model, sigma):
    return (sigma * model.gamma + 2) / (2 - model.gamma)


def nu_tilde(wspec, model, eps, t, v, grad_phi, nu=None):
    """nu + eps^2 [ (v/2).grad phi + 2 theta_tilde v.grad phi + vartheta sigma |v|^2/(1+t)^(1+sigma) ]."""
    v = np.asarray(v, dtype=float)
    gp = np.asarray(grad_phi, dtype=float)
    if nu is None:
        nu = collision_frequency_radial(model, v)
    vg = v @ gp
    th = wspec.theta_tilde(t)
    s = wspec.sigma_exp
    extra = (0.5 * vg + 2 * th * vg
             + wspec.vartheta * s * np.sum(v * v, axis=-1) / (1 + t) ** (1 + s))
    return nu + eps ** 2 * extra


def field_bound(delta=1e-2):
    """|grad phi|_inf <= delta (1+t)^(-5/4), the a priori decay profile."""
    return lambda t: delta * (1 + np.asarray(t, dtype=float)) ** -1.25


def default_sample_set(n_t=40, n_v=60, t_max=1e4, v_max=200.0, refine=1):
    """Times and speeds for the nu-tilde check; refine=2 interleaves midpoints (log scale)."""
    def axis(n, top):
        m = (n - 1) * refine + 1
        return np.concatenate([[0.0], np.geomspace(1e-2, top, m)])
    return axis(n_t, t_max), axis(n_v, v_max)


def nu_tilde_bound_check(wspec, model, eps, field_bound_fn, sample_set):
    """min over samples of (1/eps^2) nu_tilde / [eps^(-4/5) (1+t)^(varrho - 1)].

    At each (t, |v|) the field is taken anti-parallel to v with magnitude
    field_bound_fn(t), the least favourable direction.
    """
    times, speeds = sample_set
    rho_exp = varrho(model, wspec.sigma_exp)
    vv = np.zeros((speeds.size, 3))
    vv[:, 0] = speeds
    nu = collision_frequency_radial(model, vv)
    best = math.inf
    worst = None
    for t in times:
        gp = np.array([-float(field_bound_fn(t)), 0.0, 0.0])
        nt = nu_tilde(wspec, model, eps, t, vv, gp, nu=nu)
        ratio = (nt / eps ** 2) / (eps ** -0.8 * (1 + t) ** (rho_exp - 1))
        i = int(np.argmin(ratio))
        if ratio[i] < best:
            best = float(ratio[i])
            worst = (float(t), float(speeds[i]))
    params = {"vartheta": wspec.vartheta, "sigma": wspec.sigma_exp, "gamma": model.gamma,
              "eps": eps, "varrho": rho_exp}
    return NuTildeCheck(min_ratio=best, worst_point=worst, params=params,
                        n_samples=len(times) * len(speeds))


# ---------------------------------------------------------------------------
# characteristics

class FieldHistory:
    """phi(tau, x) from snapshots: linear in tau, trigonometric interpolation in x.

    Nyquist modes are dropped so that off-grid evaluation is real and smooth.
    """

    def __init__(self, sgrid, times, phis):
        self.sgrid = sgrid
        self.times = np.atleast_1d(np.asarray(times, dtype=float))
        phis = np.asarray(phis, dtype=float).reshape((len(self.times),) + sgrid.shape)
        nd = sgrid.dim
        N = sgrid.per_axis_count
        k = 2 * math.pi * np.fft.fftfreq(N, d=sgrid.spacing)
        keep = np.abs(np.fft.fftfreq(N) * N) < N // 2
        grids = np.meshgrid(*([k] * nd), indexing="ij")
        mask = np.ones(sgrid.shape, dtype=bool)
        for g in np.meshgrid(*([keep] * nd), indexing="ij"):
            mask &= g
        self.kvec = np.stack([g[mask] for g in grids], axis=-1)      # (m, nd)
        coef = np.fft.fftn(phis, axes=tuple(range(1, nd + 1))) / N ** nd
        self.coef = coef[:, mask]                                      # (n_t, m)

    @classmethod
    def frozen(cls, sgrid, phi):
        return cls(sgrid, [0.0], [phi])

    def _coef_at(self, tau):
        if len(self.times) == 1:
            return self.coef[0]
        i = int(np.clip(np.searchsorted(self.times, tau) - 1, 0, len(self.times) - 2))
        s = (tau - self.times[i]) / (self.times[i + 1] - self.times[i])
        s = min(max(s, 0.0), 1.0)
        return (1 - s) * self.coef[i] + s * self.coef[i + 1]

    def derivatives(self, tau, x):
        """grad phi (3,) and Hessian (3, 3) at one point x (3-vector)."""
        nd = self.sgrid.dim
        c = self._coef_at(tau)
        ph = np.exp(1j * (self.kvec @ np.asarray(x[:nd], dtype=float)))
        cp = c * ph
        g = np.zeros(3)
        H = np.zeros((3, 3))
        g[:nd] = np.real(1j * (self.kvec.T @ cp))
        H[:nd, :nd] = -np.real((self.kvec.T * cp) @ self.kvec)
        return g, H


@dataclass
class CharacteristicPath:
    taus: np.ndarray
    X: np.ndarray
    V: np.ndarray
    jac_det: np.ndarray
    jac_cond: np.ndarray


def trace_characteristics(history, eps, t, x, v, n_steps=200, max_cond=1e12):
    """Backward RK4 for dX/dtau = V/eps, dV/dtau = -grad phi(tau, X) from tau = t to 0.

    J = dX/dv and W = dV/dv follow dJ/dtau = W/eps, dW/dtau = -Hess phi J with
    J(t) = 0, W(t) = I.  Positions are wrapped into the box.
    """
    L = history.sgrid.box_length
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    h = -t / n_steps

    def rhs(tau, y):
        X, V = y[:3], y[3:6]
        J = y[6:15].reshape(3, 3)
        W = y[15:24].reshape(3, 3)
        g, H = history.derivatives(tau, X)
        return np.concatenate([V / eps, -g, (W / eps).ravel(), (-H @ J).ravel()])

    y = np.concatenate([x, v, np.zeros(9), np.eye(3).ravel()])
    taus = [t]
    Xs, Vs, dets, conds = [x.copy()], [v.copy()], [0.0], [np.inf]
    tau = t
    for _ in range(n_steps):
        k1 = rhs(tau, y)
        k2 = rhs(tau + 0.5 * h, y + 0.5 * h * k1)
        k3 = rhs(tau + 0.5 * h, y + 0.5 * h * k2)
        k4 = rhs(tau + h, y + h * k3)
        y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        tau = tau + h
        J = y[6:15].reshape(3, 3)
        c = np.linalg.cond(J)
        if c > max_cond:
            raise FloatingPointError(f"variational matrix ill-conditioned (cond {c:.2e}) "
                                     f"at tau = {tau:.4g}")
        taus.append(max(tau, 0.0))
        Xs.append(np.mod(y[:3], L))
        Vs.append(y[3:6].copy())
        dets.append(abs(np.linalg.det(J)))
        conds.append(c)
    return CharacteristicPath(np.array(taus), np.array(Xs), np.array(Vs), np.array(dets),
                              np.array(conds))


def jacobian_bracket(path, eps):
    """(lower ratio, upper ratio): min and max of |det| / (|t - tau|^3 / eps^3) over tau < t."""
    t = path.taus[0]
    ref = np.abs(t - path.taus[1:]) ** 3 / eps ** 3
    r = path.jac_det[1:] / ref
    return float(np.min(r)), float(np.max(r))


# ---------------------------------------------------------------------------
# hydrodynamic limit

def kinetic_fluid_fields(state):
    rho, u, theta = kinetic.fluid_variables(state.f, state.vgrid)
    return {"rho": rho, "u": np.moveaxis(u, -1, 0), "theta": theta, "grad_phi": state.grad_phi()}


def fluid_fields(fstate):
    sg = fstate.sgrid
    E = np.zeros((3,) + sg.shape)
    for i, g in enumerate(sg.gradient(fstate.phi)):
        E[i] = g
    return {"rho": fstate.rho, "u": fstate.u, "theta": fstate.theta, "grad_phi": E}


def hydro_limit_error(kinetic_runs, fluid_run, time_tol=1e-9):
    """Sup-over-time L^2_x errors of (rho, u, theta, grad phi) per eps, plus the fitted order.

    kinetic_runs maps eps -> run (with kept states); record times must match
    the fluid run.
    """
    table = {}
    f_states = fluid_run.states
    f_times = np.array([s.time for s in f_states])
    for eps, run in sorted(kinetic_runs.items()):
        ks = run.states
        if not ks:
            raise ValueError("kinetic runs must keep their states")
        if ks[0].sgrid != f_states[0].sgrid:
            raise ValueError("kinetic and fluid runs use different spatial grids")
        k_times = np.array([s.time for s in ks])
        if k_times.shape != f_times.shape or np.max(np.abs(k_times - f_times)) > time_tol:
            raise ValueError("kinetic and fluid record times differ")
        dx = ks[0].sgrid.cell_volume
        errs = {"rho": 0.0, "u": 0.0, "theta": 0.0, "grad_phi": 0.0}
        for s, fs in zip(ks, f_states):
            a = kinetic_fluid_fields(s)
            b = fluid_fields(fs)
            for key in errs:
                d = a[key] - b[key]
                errs[key] = max(errs[key], math.sqrt(float(np.sum(d * d) * dx)))
        errs["total"] = math.sqrt(sum(errs[k] ** 2 for k in ("rho", "u", "theta", "grad_phi")))
        table[float(eps)] = errs
    order = None
    if len(table) >= 2:
        e = np.array(sorted(table))
        tot = np.array([table[x]["total"] for x in e])
        if np.all(tot > 0):
            order = float(np.polyfit(np.log(e), np.log(tot), 1)[0])
    return table, order


def micro_part_smallness(run):
    """(eps, trapezoid integral of the recorded ||(I-P) f||^2)."""
    t = run.series("t")
    m = run.series("micro_norm2")
    eps = run.eps
    integral = float(np.sum(0.5 * np.diff(t) * (m[1:] + m[:-1]))) if len(t) > 1 else 0.0
    return eps, integral
