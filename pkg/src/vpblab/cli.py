"""Command-line front end: ``vpb <subcommand> --config <path> [--out DIR] [--seed N]``.

The config is an INI-style key-value file whose sections mirror the modules
(kinetic, weights, spectral, solver, nsfp, hydro, characteristics, nu_tilde).
Every run writes CSV time series (first column ``t``), a structured-text
report and a manifest with the SHA-256 of every emitted file.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 acceptance gate
failed (audit-type subcommands).
"""
import argparse
import configparser
import csv
import hashlib
import math
import os
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, diagnostics, kinetic, nsfp, solver, spectral

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_GATE = 4

SUBCOMMANDS = ("operator-audit", "linear-decay", "nonlinear-run", "nsfp-run", "hydro-limit",
               "characteristics", "nu-tilde-check")


class ConfigError(ValueError):
    """All violations found in one pass over a config file."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------------------
# schema

def _range(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(x):
        if lo is not None and (x <= lo if lo_open else x < lo):
            return False
        if hi is not None and (x >= hi if hi_open else x > hi):
            return False
        return True
    lb = "" if lo is None else ("(" if lo_open else "[") + f"{lo}"
    ub = "" if hi is None else f"{hi}" + (")" if hi_open else "]")
    desc = f"{lb or '(-inf'}, {ub or 'inf)'}"
    return check, desc


def _choice(*opts):
    return (lambda x: x in opts), "one of " + "|".join(opts)


def _float_list(text):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(float(s) for s in items)


def _bool(text):
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto_float(text):
    return None if text.strip().lower() == "auto" else float(text)


POSITIVE = _range(0, lo_open=True)
EPS_RANGE = _range(0, 1, lo_open=True)


def _all_in(rng):
    check, desc = rng
    return (lambda xs: all(check(x) for x in xs)), "each in " + desc


def _positive_or_auto(x):
    return x is None or x > 0


# section -> key -> (parser, default, (check, description) or None)
SCHEMA = {
    "kinetic": {
        "gamma": (float, 1.0, _range(-3, 1, lo_open=True)),
        "cutoff": (float, 1.0, POSITIVE),
        "n_v": (int, 16, _range(4)),
        "r_v": (float, 8.0, _range(6)),
        "n_polar": (int, 4, _range(2)),
        "n_azimuth": (int, 8, _range(2)),
        "refine_n_v": (int, 20, _range(4)),
        "refine_r_v": (float, 8.0, _range(6)),
    },
    "weights": {
        "vartheta": (float, 0.01, _range(0, 0.05, lo_open=True)),
        "sigma": (float, 1.0 / 24.0, _range(0, 0.25, lo_open=True)),
        "ell": (float, 1.0, _range(0)),
        "ell0": (float, 0.0, _range(0)),
    },
    "spectral": {
        "eps": (float, 1.0, EPS_RANGE),
        "k_min": (float, 1e-3, POSITIVE),
        "k_max": (float, 8.0, POSITIVE),
        "n_k": (int, 48, _range(2)),
        "t_end": (float, 300.0, POSITIVE),
        "n_t": (int, 600, _range(8)),
        "window_start": (float, 20.0, _range(0)),
        "window_end": (float, 300.0, POSITIVE),
        "method": (str, "exact", _choice("exact", "split")),
        "dt": (float, 0.1, POSITIVE),
        "profile": (str, "thermal", _choice("thermal", "density")),
        "k_cut": (float, 1.0, POSITIVE),
        "reduced": (_bool, True, None),
    },
    "solver": {
        "eps": (float, 0.5, EPS_RANGE),
        "n_x": (int, 64, _range(8)),
        "box_length": (float, 2 * math.pi, POSITIVE),
        "dim": (int, 1, ((lambda d: d in (1, 3)), "1 or 3")),
        "n_v": (int, 12, _range(4)),
        "r_v": (float, 6.0, _range(6)),
        "dt": (float, 0.01, POSITIVE),
        "t_end": (float, 2.0, _range(0)),
        "scheme": (str, "strang", _choice("lie", "strang")),
        "collision": (str, "bgk", _choice("bgk", "full")),
        "nu0": (float, 1.0, POSITIVE),
        "record_every": (int, 10, _range(1)),
        "nonlinear": (_bool, True, None),
        "preset": (str, "density", _choice("density", "shear", "thermal", "random")),
        "amplitude": (float, 0.05, _range(0)),
    },
    "nsfp": {
        "n_x": (int, 32, _range(8)),
        "box_length": (float, 2 * math.pi, POSITIVE),
        "dim": (int, 1, ((lambda d: d in (1, 3)), "1 or 3")),
        "lam": (_auto_float, None, (_positive_or_auto, "positive or auto")),
        "kappa": (_auto_float, None, (_positive_or_auto, "positive or auto")),
        "nu0": (float, 1.0, POSITIVE),
        "dt": (float, 1.0 / 256, POSITIVE),
        "t_end": (float, 1.0, _range(0)),
        "record_every": (int, 16, _range(1)),
        "forcing": (_bool, True, None),
        "amplitude": (float, 0.1, _range(0)),
    },
    "hydro": {
        "eps_list": (_float_list, (0.5, 0.25, 0.125), _all_in(EPS_RANGE)),
        "dt_factor": (float, 0.5, POSITIVE),
        "t_end": (float, 1.0, POSITIVE),
        "record_interval": (float, 0.0625, POSITIVE),
        "fluid_dt": (float, 1.0 / 256, POSITIVE),
        "n_x": (int, 32, _range(8)),
        "n_v": (int, 12, _range(4)),
        "r_v": (float, 6.0, _range(6)),
        "nu0": (float, 1.0, POSITIVE),
        "amplitude": (float, 0.1, POSITIVE),
        "min_order": (float, 0.8, None),
    },
    "characteristics": {
        "eps_list": (_float_list, (1.0, 0.5, 0.25), _all_in(EPS_RANGE)),
        "t_factor": (float, 0.1, POSITIVE),
        "field_amplitude": (float, 1e-2, _range(0)),
        "n_x": (int, 8, _range(8)),
        "n_steps": (int, 100, _range(4)),
        "n_points": (int, 8, _range(1)),
        "free_t": (float, 1.0, POSITIVE),
    },
    "nu_tilde": {
        "gammas": (_float_list, (-1.0, -2.0), _all_in(_range(-3, 0, lo_open=True, hi_open=True))),
        "eps_list": (_float_list, (1.0, 0.5, 0.25), _all_in(EPS_RANGE)),
        "n_t": (int, 40, _range(2)),
        "n_v": (int, 60, _range(2)),
        "t_max": (float, 1e4, POSITIVE),
        "v_max": (float, 200.0, POSITIVE),
        "delta": (float, 1e-2, _range(0)),
        "max_change": (float, 0.05, POSITIVE),
    },
}


@dataclass
class ScenarioConfig:
    values: dict
    source: str = "<defaults>"

    def __getitem__(self, section):
        return self.values[section]

    def echo(self):
        lines = []
        for sec in SCHEMA:
            lines.append(f"[{sec}]")
            for key in SCHEMA[sec]:
                lines.append(f"{key} = {_fmt_value(self.values[sec][key])}")
        return "\n".join(lines)


def _fmt_value(v):
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt_value(x) for x in v)
    return str(v)


def parse_config_text(text, source="<string>"):
    cp = configparser.ConfigParser(interpolation=None, strict=True, default_section="\x00")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"malformed config: {exc}"]) from None
    errors = []
    values = {sec: {k: entry[1] for k, entry in keys.items()} for sec, keys in SCHEMA.items()}
    for sec in cp.sections():
        if sec not in SCHEMA:
            errors.append(f"unknown section [{sec}]")
            continue
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                errors.append(f"unknown key {sec}.{key}")
                continue
            parse, _, check = SCHEMA[sec][key]
            try:
                val = parse(raw)
            except ValueError:
                errors.append(f"{sec}.{key}: cannot parse {raw!r}")
                continue
            if check is not None and not check[0](val):
                errors.append(f"{sec}.{key} = {raw} out of range (allowed: {check[1]})")
                continue
            values[sec][key] = val
    errors.extend(_cross_checks(values))
    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(values, source)


def _cross_checks(v):
    errs = []
    s = v["spectral"]
    if s["k_min"] >= s["k_max"]:
        errs.append("spectral.k_min must be below spectral.k_max")
    if not s["window_start"] < s["window_end"] <= s["t_end"]:
        errs.append("spectral window must satisfy window_start < window_end <= t_end")
    for sec in ("solver", "nsfp", "hydro", "characteristics"):
        n = v[sec]["n_x"]
        if n & (n - 1):
            errs.append(f"{sec}.n_x = {n} must be a power of two")
    for sec, nk, rk in (("kinetic", "n_v", "r_v"), ("kinetic", "refine_n_v", "refine_r_v"),
                        ("solver", "n_v", "r_v"), ("hydro", "n_v", "r_v")):
        try:
            kinetic.build_velocity_grid(v[sec][nk], v[sec][rk])
        except ValueError as exc:
            errs.append(f"{sec}.{nk}/{rk}: {exc}")
    k = v["kinetic"]
    for key in ("n_polar", "n_azimuth"):
        if k[key] % 2:
            errs.append(f"kinetic.{key} must be even")
    for sec in ("solver", "nsfp"):
        c = v[sec]
        steps = c["t_end"] / c["dt"]
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            errs.append(f"{sec}.t_end must be an integer multiple of {sec}.dt")
    h = v["hydro"]
    for name in ("record_interval", "fluid_dt"):
        r = h["t_end"] / h[name]
        if abs(r - round(r)) > 1e-9 * max(1.0, r):
            errs.append(f"hydro.t_end must be an integer multiple of hydro.{name}")
    if v["solver"]["collision"] == "full" and v["solver"]["dim"] == 3:
        errs.append("solver.collision = full is only supported with dim = 1")
    return errs


def parse_config(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"config file not found: {path}"])
    return parse_config_text(p.read_text(), source=str(p))


# ---------------------------------------------------------------------------
# serialization

def _fmt_number(x):
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def write_timeseries(columns, path):
    """CSV with a header row; ``columns`` maps label -> 1-D array, first label ``t``."""
    labels = list(columns)
    if not labels or labels[0] != "t":
        raise ValueError("the first column must be 't'")
    cols = [np.asarray(columns[k], dtype=float).ravel() for k in labels]
    n = len(cols[0])
    if any(len(c) != n for c in cols):
        raise ValueError("columns have different lengths")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(labels)
        for i in range(n):
            w.writerow([_fmt_number(c[i]) for c in cols])


def read_timeseries(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = rows[0]
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, len(labels))
    return {lab: data[:, i] for i, lab in enumerate(labels)}


def write_report(report, path):
    """Structured text: ``[section]`` headers and ``key = value`` lines in insertion order."""
    with open(path, "w") as fh:
        for sec, items in report.items():
            fh.write(f"[{sec}]\n")
            for k, val in items.items():
                fh.write(f"{k} = {_report_value(val)}\n")
            fh.write("\n")


def read_report(path):
    cp = configparser.ConfigParser(interpolation=None, default_section="\x00")
    cp.optionxform = str
    cp.read(path)
    return {sec: dict(cp.items(sec)) for sec in cp.sections()}


def _report_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return _fmt_number(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return ", ".join(_report_value(x) for x in v)
    return str(v).replace("\n", " ")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, subcommand, cfg, seed, files, started):
    info = {
        "manifest": {
            "subcommand": subcommand,
            "code_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": seed,
            "config": cfg.source if cfg is not None else "<none>",
            "started": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
            "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        },
        "files": {name: _sha256(out / name) for name in sorted(files)},
    }
    if cfg is not None:
        info["config"] = {f"{sec}.{k}": _fmt_value(v) for sec in SCHEMA
                          for k, v in cfg.values[sec].items()}
    write_report(info, out / "manifest.txt")


# ---------------------------------------------------------------------------
# shared builders

def _model(cfg):
    k = cfg["kinetic"]
    return kinetic.PotentialModel(k["gamma"], k["cutoff"])


def _angular(cfg):
    k = cfg["kinetic"]
    return kinetic.build_angular_quadrature(k["n_polar"], k["n_azimuth"])


def _weights(cfg):
    w = cfg["weights"]
    return kinetic.WeightSpec(w["vartheta"], w["sigma"], w["ell"], w["ell0"])


def _random_field(sgrid, rng, k_max=3):
    """Smooth zero-mean field from random low Fourier modes, max |value| = 1."""
    N = sgrid.per_axis_count
    shape = sgrid.shape
    idx = np.fft.fftfreq(N) * N
    grids = np.meshgrid(*([idx] * sgrid.dim), indexing="ij")
    kk = np.sqrt(sum(g * g for g in grids))
    coef = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    coef[(kk < 1) | (kk > k_max)] = 0.0
    u = np.fft.ifftn(coef).real
    u -= u.mean()
    m = np.max(np.abs(u))
    return u / m if m > 0 else u


def initial_profile(preset, amplitude, sgrid, vgrid, rng):
    """Named initial data (all with zero-mean density)."""
    x = sgrid.points
    shape = sgrid.shape
    x1 = x if sgrid.dim == 1 else np.broadcast_to(x[:, None, None], shape)
    A = amplitude
    if preset == "density":
        return solver.macro_initial(sgrid, vgrid, rho=A * np.cos(x1))
    if preset == "shear":
        u = np.zeros(shape + (3,))
        u[..., 1] = A * np.sin(x1)
        return solver.macro_initial(sgrid, vgrid, u=u)
    if preset == "thermal":
        # Boussinesq-consistent pair built from g = (3/2) theta - rho
        rho, theta, _ = nsfp.recover_rho_theta(A * np.cos(x1), sgrid)
        return solver.macro_initial(sgrid, vgrid, rho=rho, theta=theta)
    if preset == "random":
        rho = A * _random_field(sgrid, rng)
        theta = A * _random_field(sgrid, rng)
        u = np.stack([A * _random_field(sgrid, rng) for _ in range(3)], axis=-1)
        f = solver.macro_initial(sgrid, vgrid, rho=rho, u=u, theta=theta)
        micro = kinetic.micro_part(rng.standard_normal(f.shape) * vgrid.sqrt_mu, vgrid)
        return f + 0.1 * A * micro
    raise ValueError(f"unknown preset {preset!r}")


def _shear_thermal_fluid(sgrid, A):
    shape = sgrid.shape
    x = sgrid.points
    x1 = x if sgrid.dim == 1 else np.broadcast_to(x[:, None, None], shape)
    u0 = np.zeros((3,) + shape)
    u0[1] = A * np.sin(x1)
    u0[2] = A * np.cos(2 * x1)
    if sgrid.dim == 3:
        x2 = np.broadcast_to(x[None, :, None], shape)
        u0[0] += A * np.sin(x2)
    return nsfp.fluid_state(sgrid, u0, rho0=A * np.cos(x1), theta0=0.5 * A * np.sin(2 * x1))


# ---------------------------------------------------------------------------
# subcommands; each returns (report, csv dict name -> columns, gate ok)

def cmd_operator_audit(cfg, rng):
    k = cfg["kinetic"]
    model = _model(cfg)
    ang = _angular(cfg)
    rows = {}
    for tag, n, r in (("base", k["n_v"], k["r_v"]), ("refined", k["refine_n_v"], k["refine_r_v"])):
        t0 = time.perf_counter()
        grid = kinetic.build_velocity_grid(n, r)
        op = kinetic.assemble_linearized(model, grid, ang, compute_gap=True)
        kdim, ev = kinetic.kernel_dimension(op)
        rows[tag] = {
            "n_v": n, "r_v": r,
            "symmetry_defect": op.defects["symmetry"],
            "symmetry_tolerance": 1e-9 * op.defects["nu_max"],
            "null_space_defect_raw": op.defects["null_space_raw"],
            "nu_max": op.defects["nu_max"],
            "kernel_dimension": kdim,
            "lowest_eigenvalues": [float(e) for e in ev[:7]],
            "sigma0_estimate": op.sigma0_estimate,
            "seconds": round(time.perf_counter() - t0, 3),
        }
    b, r = rows["base"], rows["refined"]
    change = abs(r["sigma0_estimate"] - b["sigma0_estimate"]) / b["sigma0_estimate"]
    gates = {
        "symmetry": b["symmetry_defect"] <= b["symmetry_tolerance"],
        "kernel_dimension": b["kernel_dimension"] == 5 and r["kernel_dimension"] == 5,
        "sigma0_positive": b["sigma0_estimate"] > 0 and r["sigma0_estimate"] > 0,
        "sigma0_refinement": change <= 0.2,
    }
    report = {"operator": {"gamma": model.gamma, "cutoff": model.angular_amplitude},
              "base": b, "refined": r,
              "gates": {**gates, "sigma0_relative_change": change}}
    return report, {}, all(gates.values())


def cmd_linear_decay(cfg, rng):
    s = cfg["spectral"]
    k = cfg["kinetic"]
    grid = kinetic.build_velocity_grid(k["n_v"], k["r_v"])
    op = kinetic.assemble_linearized(_model(cfg), grid, _angular(cfg))
    kgrid = spectral.radial_k_grid(s["k_min"], s["k_max"], s["n_k"])
    t = np.linspace(0.0, s["t_end"], s["n_t"] + 1)
    factory = spectral.mode_factory(op, grid, s["eps"], reduced=s["reduced"])
    profile = spectral.ball_profile(grid, s["profile"], s["k_cut"])
    series = spectral.synthesize_whole_space_norms(kgrid, profile, factory, t,
                                                   method=s["method"], dt=s["dt"])
    window = (s["window_start"], s["window_end"])
    fits = {}
    for key, ser in series.items():
        fit = spectral.fit_decay_exponent(ser.sqrt(), window)
        fits[key] = {"exponent": fit.exponent, "intercept": fit.intercept,
                     "residual": fit.residual, "n_samples": fit.n_samples}
    targets = {"L2": (-0.9, -0.6), "grad": (-1.45, -1.05), "grad_phi": (-math.inf, -1.0)}
    gates = {key: targets[key][0] <= fits[key]["exponent"] <= targets[key][1] for key in targets}
    cols = {"t": t}
    cols.update({f"{key}_sq": series[key].values for key in ("L2", "grad", "grad_phi")})
    report = {"decay": {"eps": s["eps"], "window": window, "profile": s["profile"],
                        "k_nodes": s["n_k"]}}
    for key in fits:
        report[f"fit_{key}"] = fits[key]
    report["gates"] = gates
    return report, {"decay.csv": cols}, all(gates.values())


def _solver_setup(c):
    vg = kinetic.build_velocity_grid(c["n_v"], c["r_v"])
    sg = solver.SpatialGrid(c["n_x"], c["box_length"], c["dim"])
    return sg, vg


def cmd_nonlinear_run(cfg, rng):
    c = cfg["solver"]
    sg, vg = _solver_setup(c)
    if c["collision"] == "bgk":
        ops = solver.Operators(kinetic.BGKOperator(vg, c["nu0"]))
    else:
        L = kinetic.assemble_linearized(_model(cfg), vg, _angular(cfg))
        ops = solver.Operators(L, model=_model(cfg), angular=_angular(cfg))
    f0 = initial_profile(c["preset"], c["amplitude"], sg, vg, rng)
    st = solver.make_state(sg, vg, f0, c["eps"])
    conf = solver.SolverConfig(c["dt"], c["t_end"], c["scheme"], c["collision"], c["nu0"],
                               c["record_every"], c["nonlinear"])
    run = solver.run_scenario(st, conf, ops)
    rep = solver.conservation_report(run)
    keys = ["mass", "momentum_1", "momentum_2", "momentum_3", "kinetic_energy",
            "field_energy", "total_energy", "f_norm2", "micro_norm2", "micro_integral",
            "neutrality", "poisson_residual"]
    cols = {"t": run.series("t")}
    cols.update({key: run.series(key) for key in keys})
    report = {
        "run": {"eps": c["eps"], "preset": c["preset"], "amplitude": c["amplitude"],
                "collision": c["collision"], "scheme": c["scheme"], "steps": int(round(c["t_end"] / c["dt"])),
                "records": len(run.records)},
        "conservation": {"mass_drift_rate": rep["mass_drift_rate"],
                         "max_energy_drift": float(np.max(np.abs(rep["total_energy_drift"]))),
                         "max_poisson_residual": run.max_poisson_residual,
                         "max_neutrality": run.max_neutrality},
        "micro": {"time_integral": run.micro_integral},
    }
    return report, {"timeseries.csv": cols}, True


def _fluid_coefficients(c):
    lam, kap = c["lam"], c["kappa"]
    if lam is None or kap is None:
        lam = 1.0 / c["nu0"] if lam is None else lam
        kap = 1.0 / c["nu0"] if kap is None else kap
    return nsfp.TransportCoefficients(lam, kap)


def cmd_nsfp_run(cfg, rng):
    c = cfg["nsfp"]
    sg = solver.SpatialGrid(c["n_x"], c["box_length"], c["dim"])
    coeffs = _fluid_coefficients(c)
    fs0 = _shear_thermal_fluid(sg, c["amplitude"])
    run = nsfp.nsfp_run(fs0, coeffs, c["dt"], c["t_end"], c["record_every"], c["forcing"])
    dv = sg.cell_volume
    cols = {"t": run.times,
            "kinetic_energy": run.series(nsfp.kinetic_energy),
            "rho_l2": run.series(lambda s: math.sqrt(float(np.sum(s.rho ** 2)) * dv)),
            "theta_l2": run.series(lambda s: math.sqrt(float(np.sum(s.theta ** 2)) * dv)),
            "constraint_residual": run.series(lambda s: nsfp.constraint_residual(s.rho, s.theta, sg))}
    report = {"nsfp": {"lam": coeffs.lam, "kappa": coeffs.kappa, "forcing": c["forcing"],
                       "records": len(run.states)},
              "checks": {"max_divergence": run.max_divergence,
                         "max_constraint_residual": run.max_constraint_residual}}
    return report, {"nsfp.csv": cols}, True


def cmd_hydro_limit(cfg, rng):
    h = cfg["hydro"]
    vg = kinetic.build_velocity_grid(h["n_v"], h["r_v"])
    sg = solver.SpatialGrid(h["n_x"])
    bgk = kinetic.BGKOperator(vg, h["nu0"])
    coeffs = nsfp.compute_transport_coefficients(bgk, vg)
    fs0 = _shear_thermal_fluid(sg, h["amplitude"])
    f_every = int(round(h["record_interval"] / h["fluid_dt"]))
    frun = nsfp.nsfp_run(fs0, coeffs, h["fluid_dt"], h["t_end"], record_every=max(f_every, 1))
    f0 = solver.macro_initial(sg, vg, fs0.rho, np.moveaxis(fs0.u, 0, -1), fs0.theta)
    runs = {}
    cons = {}
    for eps in h["eps_list"]:
        # dt ~ eps^3 keeps the splitting error in the viscosity below O(eps)
        n_rec = max(1, math.ceil(h["record_interval"] / (h["dt_factor"] * eps ** 3) - 1e-9))
        dt = h["record_interval"] / n_rec
        st = solver.make_state(sg, vg, f0, eps)
        conf = solver.SolverConfig(dt, h["t_end"], record_every=n_rec, nu0=h["nu0"])
        run = solver.run_scenario(st, conf, solver.Operators(bgk), keep_states=True)
        runs[eps] = run
        rep = solver.conservation_report(run)
        cons[eps] = (rep["mass_drift_rate"], run.max_poisson_residual, run.max_neutrality)
    table, order = diagnostics.hydro_limit_error(runs, frun)
    eps_sorted = sorted(table)
    tot = [table[e]["total"] for e in eps_sorted]
    decreasing = all(tot[i] < tot[i + 1] for i in range(len(tot) - 1))
    gates = {"errors_decreasing": decreasing,
             "order": order is not None and order >= h["min_order"]}
    report = {"hydro": {"lam": coeffs.lam, "kappa": coeffs.kappa, "eps_list": eps_sorted,
                        "fitted_order": order if order is not None else float("nan")}}
    for e in eps_sorted:
        report[f"eps_{e!r}"] = {**table[e], "mass_drift_rate": cons[e][0],
                                "max_poisson_residual": cons[e][1],
                                "max_neutrality": cons[e][2]}
    report["gates"] = gates
    # per-record error history
    cols = {"t": frun.times}
    for e in eps_sorted:
        errs = []
        for s, fsr in zip(runs[e].states, frun.states):
            a = diagnostics.kinetic_fluid_fields(s)
            b = diagnostics.fluid_fields(fsr)
            d2 = sum(float(np.sum((a[q] - b[q]) ** 2)) for q in ("rho", "u", "theta", "grad_phi"))
            errs.append(math.sqrt(d2 * sg.cell_volume))
        cols[f"error_eps_{e!r}"] = errs
    return report, {"hydro_errors.csv": cols}, all(gates.values())


def _small_field(sg, amplitude, rng):
    """Random low-mode potential scaled so that sum |c_k| |k|^2 = amplitude."""
    N = sg.per_axis_count
    shape = sg.shape
    idx = np.fft.fftfreq(N) * N
    grids = np.meshgrid(*([idx] * sg.dim), indexing="ij")
    kk2 = sum(g * g for g in grids) * (2 * math.pi / sg.box_length) ** 2
    n2 = sum(g * g for g in grids)
    coef = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    coef[(n2 < 1) | (n2 > 4)] = 0.0
    phi = np.fft.ifftn(coef).real
    # the Hessian sup-norm is bounded by the sum of |c_k| |k|^2
    ch = np.fft.fftn(phi) / phi.size
    bound = float(np.sum(np.abs(ch) * kk2))
    return phi * (amplitude / bound) if bound > 0 else phi


def cmd_characteristics(cfg, rng):
    c = cfg["characteristics"]
    sg = solver.SpatialGrid(c["n_x"], dim=3)
    phi = _small_field(sg, c["field_amplitude"], rng)
    hist = diagnostics.FieldHistory.frozen(sg, phi)
    free = diagnostics.FieldHistory.frozen(sg, np.zeros(sg.shape))
    pts = rng.uniform(0, sg.box_length, size=(c["n_points"], 3))
    vels = rng.standard_normal((c["n_points"], 3))
    report = {"field": {"hessian_bound": c["field_amplitude"], "n_points": c["n_points"]}}
    csvs = {}
    ok_free = True
    ok_bracket = True
    for eps in c["eps_list"]:
        worst_free = 0.0
        lo, hi = math.inf, 0.0
        ratios = None
        for x, v in zip(pts, vels):
            p0 = diagnostics.trace_characteristics(free, eps, c["free_t"], x, v, c["n_steps"])
            a, b = diagnostics.jacobian_bracket(p0, eps)
            worst_free = max(worst_free, abs(a - 1), abs(b - 1))
            t = c["t_factor"] * math.sqrt(eps)
            p = diagnostics.trace_characteristics(hist, eps, t, x, v, c["n_steps"])
            a, b = diagnostics.jacobian_bracket(p, eps)
            lo, hi = min(lo, a), max(hi, b)
            r = p.jac_det[1:] / (np.abs(t - p.taus[1:]) ** 3 / eps ** 3)
            if ratios is None:
                taus = p.taus[1:]
                ratios = [r]
            else:
                ratios.append(r)
        ok_free &= worst_free <= 1e-10
        ok_bracket &= lo >= 0.5 and hi <= 2.0
        report[f"eps_{eps!r}"] = {"t": c["t_factor"] * math.sqrt(eps),
                                  "free_streaming_max_deviation": worst_free,
                                  "bracket_min": lo, "bracket_max": hi}
        cols = {"t": taus}
        for i, r in enumerate(ratios):
            cols[f"det_ratio_{i}"] = r
        csvs[f"jacobian_eps_{eps!r}.csv"] = cols
    gates = {"free_streaming_exact": ok_free, "factor_two_bracket": ok_bracket}
    report["gates"] = gates
    return report, csvs, all(gates.values())


def cmd_nu_tilde_check(cfg, rng):
    c = cfg["nu_tilde"]
    wspec = _weights(cfg)
    fb = diagnostics.field_bound(c["delta"])
    base = diagnostics.default_sample_set(c["n_t"], c["n_v"], c["t_max"], c["v_max"], 1)
    fine = diagnostics.default_sample_set(c["n_t"], c["n_v"], c["t_max"], c["v_max"], 2)
    report = {"weights": {"vartheta": wspec.vartheta, "sigma": wspec.sigma_exp}}
    positive = True
    stable = True
    times = base[0]
    cols = {"t": times}
    for g in c["gammas"]:
        model = kinetic.PotentialModel(g, cfg["kinetic"]["cutoff"])
        for eps in c["eps_list"]:
            r1 = diagnostics.nu_tilde_bound_check(wspec, model, eps, fb, base)
            r2 = diagnostics.nu_tilde_bound_check(wspec, model, eps, fb, fine)
            change = abs(r2.min_ratio - r1.min_ratio) / abs(r1.min_ratio)
            positive &= r1.min_ratio > 0 and r2.min_ratio > 0
            stable &= change < c["max_change"]
            report[f"gamma_{g!r}_eps_{eps!r}"] = {
                "min_ratio": r1.min_ratio, "min_ratio_doubled": r2.min_ratio,
                "relative_change": change, "worst_t": r1.worst_point[0],
                "worst_speed": r1.worst_point[1], "varrho": r1.params["varrho"]}
            per_t = [diagnostics.nu_tilde_bound_check(wspec, model, eps, fb,
                                                      (np.array([t]), base[1])).min_ratio
                     for t in times]
            cols[f"min_ratio_g{g!r}_e{eps!r}"] = per_t
    gates = {"positive": positive, "refinement_stable": stable}
    report["gates"] = gates
    return report, {"nu_tilde.csv": cols}, all(gates.values())


COMMANDS = {
    "operator-audit": (cmd_operator_audit, True),
    "linear-decay": (cmd_linear_decay, True),
    "nonlinear-run": (cmd_nonlinear_run, False),
    "nsfp-run": (cmd_nsfp_run, False),
    "hydro-limit": (cmd_hydro_limit, True),
    "characteristics": (cmd_characteristics, True),
    "nu-tilde-check": (cmd_nu_tilde_check, True),
}

NUMERIC_ERRORS = (FloatingPointError, ArithmeticError, np.linalg.LinAlgError,
                  solver.StepError, spectral.IntegratorError, kinetic.AssemblyError)


def _apply_threads():
    raw = os.environ.get("VPB_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError([f"VPB_THREADS must be a positive integer, got {raw!r}"]) from None
    if n < 1:
        raise ConfigError([f"VPB_THREADS must be a positive integer, got {raw!r}"])
    # the compiled kernels are serial; the cap applies to the BLAS pools
    return threadpool_limits(limits=n)


def run(subcommand, config_path, out_dir, seed=0, stream=sys.stdout):
    """Run one subcommand; returns the exit code."""
    started = time.time()
    out = Path(out_dir)
    cfg = None
    limiter = None
    try:
        limiter = _apply_threads()
        cfg = parse_config(config_path)
    except ConfigError as exc:
        out.mkdir(parents=True, exist_ok=True)
        write_report({"failure": {"exit_code": EXIT_CONFIG, "kind": "config",
                                  "n_errors": len(exc.errors)},
                      "errors": {f"error_{i + 1}": e for i, e in enumerate(exc.errors)}},
                     out / "report.txt")
        write_manifest(out, subcommand, None, seed, ["report.txt"], started)
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        if limiter is not None:
            limiter.restore_original_limits()
        return EXIT_CONFIG
    print(cfg.echo(), file=stream)
    out.mkdir(parents=True, exist_ok=True)
    fn, gated = COMMANDS[subcommand]
    rng = np.random.default_rng(seed)
    files = []
    try:
        report, csvs, ok = fn(cfg, rng)
    except NUMERIC_ERRORS as exc:
        write_report({"failure": {"exit_code": EXIT_NUMERIC, "kind": "numeric",
                                  "error_type": type(exc).__name__, "message": str(exc)}},
                     out / "report.txt")
        write_manifest(out, subcommand, cfg, seed, ["report.txt"], started)
        print(f"numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    for name, cols in csvs.items():
        write_timeseries(cols, out / name)
        files.append(name)
    code = EXIT_GATE if (gated and not ok) else EXIT_OK
    report = {"status": {"subcommand": subcommand, "seed": seed, "exit_code": code,
                         "gated": gated, "passed": bool(ok)}, **report}
    write_report(report, out / "report.txt")
    files.append("report.txt")
    write_manifest(out, subcommand, cfg, seed, files, started)
    print(f"{subcommand}: {'pass' if ok else 'FAIL'} -> {out}", file=stream)
    return code


def main(argv=None):
    ap = argparse.ArgumentParser(prog="vpb", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="key-value config file")
    ap.add_argument("--out", default="vpb-out", help="output directory")
    ap.add_argument("--seed", type=int, default=0, help="rng seed (unsigned 64-bit)")
    args = ap.parse_args(argv)
    if not 0 <= args.seed < 2 ** 64:
        ap.error("--seed must be an unsigned 64-bit integer")
    return run(args.subcommand, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
