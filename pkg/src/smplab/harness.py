"""Experiment orchestration: config parsing, runs, reports, bit-exact replay.

Configs are INI files with one section per block (see README for the full
schema).  Every numeric result of a run lands in ``report.json`` under
``payload`` together with the resolved config, the seed, the artifact
version, and the wall-clock runtime; ``replay`` re-runs the embedded config
and demands a byte-identical payload.
"""

from __future__ import annotations

import configparser
import json
import math
import time
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path

import numpy as np

from . import __version__
from .bsde import dump_adjoint_csv, l2_dtP_norm, relative_l2_dtP
from .errors import ConfigError, ReplayMismatch
from .malliavin import (
    Compose,
    PolynomialBasis,
    bm_integral,
    check_duality,
    clark_ocone_reconstruct,
    constant,
    jump_integral,
    square_map,
)
from .model import (
    ControlledCoefficients,
    LevyMeasure,
    OpenLoopLaw,
    TimeGrid,
    build_lq_coefficients,
    validate_coefficients,
)
from .simulate import LinearCoefficients, dump_paths_csv, euler_forward, linear_closed_form, sample_noise
from .smp import adjoint_for, check_necessary_condition
from .lqsolver import (
    LqParams,
    compare_to_unconstrained,
    dump_comparison_json,
    dump_feedback_csv,
    dump_residuals_csv,
    solve_constrained,
)

EXPERIMENTS = (
    "simulate",
    "check-duality",
    "clark-ocone",
    "solve-bsde",
    "check-smp",
    "solve-lq",
    "convergence-study",
)

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _float(raw, key):
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a real number, got {raw!r}") from exc


def _int(raw, key):
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    return value


def _bool(raw, key):
    lowered = str(raw).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _float_list(raw, key):
    try:
        return [float(tok) for tok in str(raw).replace(";", ",").split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a comma-separated list of reals, got {raw!r}") from exc


def _int_list(raw, key):
    try:
        return [int(tok) for tok in str(raw).replace(";", ",").split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a comma-separated list of integers, got {raw!r}") from exc


def _atoms(raw, key):
    """Parse 'zeta:intensity;zeta:intensity' pairs."""
    pairs = []
    text = str(raw).strip()
    if not text:
        return pairs
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 2:
            raise ConfigError(f"{key}: expected 'zeta:intensity' pairs, got {chunk!r}")
        pairs.append((_float(parts[0], key), _float(parts[1], key)))
    return pairs


_PARSERS = {
    "float": _float,
    "int": _int,
    "bool": _bool,
    "float_list": _float_list,
    "int_list": _int_list,
    "atoms": _atoms,
    "str": lambda raw, key: str(raw).strip(),
}

# Section schemas: key -> (type, default); REQUIRED means no default.
REQUIRED = object()

_COMMON_SCHEMA = {
    "experiment": {"kind": ("str", None)},
    "grid": {"horizon": ("float", 1.0), "n_steps": ("int", 100)},
    "mc": {"n_paths": ("int", 10000), "seed": ("int", 1)},
    "model": {
        "family": ("str", "lq"),
        "sigma": ("float", 0.1),
        "x0": ("float", 1.0),
        "atoms": ("atoms", []),
        "gamma_scale": ("float", 1.0),
        "drift_const": ("float", 0.0),
        "drift_x": ("float", 0.0),
        "drift_u": ("float", 0.0),
        "diff_const": ("float", 0.0),
        "diff_x": ("float", 0.0),
        "diff_u": ("float", 0.0),
        "jump_const": ("float", 0.0),
        "jump_x": ("float", 0.0),
        "jump_u": ("float", 0.0),
        "run_cost_x": ("float", 0.0),
        "run_cost_u": ("float", 0.0),
        "terminal_x": ("float", 0.0),
        "b_poly": ("float_list", [0.0]),
        "b_u": ("float", 0.0),
        "sigma_poly": ("float_list", [0.0]),
        "sigma_u": ("float", 0.0),
        "gamma_poly": ("float_list", [0.0]),
        "f_poly": ("float_list", [0.0]),
        "g_poly": ("float_list", [0.0]),
        # effectively unbounded defaults kept finite so reports stay strict JSON
        "u_min": ("float", -1e308),
        "u_max": ("float", 1e308),
    },
    "basis": {"degree": ("int", 3)},
    "output": {"csv_paths": ("int", 10)},
}

_EXPERIMENT_SCHEMA = {
    "simulate": {
        "simulate": {"control": ("str", "zero"), "control_value": ("float", 0.0), "scheme": ("str", "euler")}
    },
    "check-duality": {
        "duality": {
            "functional": ("str", "bm_squared"),
            "mode": ("str", "brownian"),
            "integrand": ("str", "brownian"),
            "integrand_value": ("float", 1.0),
        }
    },
    "clark-ocone": {
        "clark_ocone": {"functional": ("str", "bm_squared"), "max_rel_error": ("float", 0.03)}
    },
    "solve-bsde": {
        "bsde": {
            "control": ("str", "zero"),
            "control_value": ("float", 0.0),
            "max_rel_distance": ("float", 0.05),
        }
    },
    "check-smp": {
        "smp": {
            "candidate": ("str", "zero"),
            "candidate_value": ("float", 0.0),
            "tau_grid": ("float_list", [0.25, 0.5, 0.75]),
            "v_grid": ("float_list", [0.0, 0.5, 1.0]),
            "eps_grid": ("float_list", [0.2, 0.1, 0.05]),
        }
    },
    "solve-lq": {
        "iteration": {"max_iters": ("int", 80), "damping": ("float", 0.5), "tol": ("float", 2e-4)}
    },
    "convergence-study": {
        "convergence": {
            "n_steps_list": ("int_list", [64, 128, 256]),
            "ratio_low": ("float", 1.4),
            "ratio_high": ("float", 2.6),
        }
    },
}


def schema_for(kind: str) -> dict:
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {', '.join(EXPERIMENTS)}")
    schema = {section: dict(keys) for section, keys in _COMMON_SCHEMA.items()}
    for section, keys in _EXPERIMENT_SCHEMA[kind].items():
        schema[section] = dict(keys)
    return schema


def parse_config(path, kind: str | None = None, overrides: dict | None = None) -> dict:
    """Read and validate an INI config; returns a flat {section: {key: value}} dict.

    Unknown sections or keys are rejected.  ``kind`` from the caller (the CLI
    subcommand) must agree with [experiment] kind when both are given.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file {path} not found or unreadable")
    file_kind = parser.get("experiment", "kind", fallback=None)
    if kind is None:
        kind = file_kind
    if kind is None:
        raise ConfigError("no experiment kind: pass a subcommand or set [experiment] kind")
    if file_kind is not None and file_kind != kind:
        raise ConfigError(f"config declares kind {file_kind!r} but {kind!r} was requested")

    schema = schema_for(kind)
    resolved: dict = {"experiment": {"kind": kind}}
    for section in parser.sections():
        if section not in schema:
            raise ConfigError(f"unknown config section [{section}] for experiment {kind!r}")
        for key in parser[section]:
            if key not in schema[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
    for section, keys in schema.items():
        resolved.setdefault(section, {})
        for key, (typ, default) in keys.items():
            if section == "experiment" and key == "kind":
                continue
            if parser.has_option(section, key):
                resolved[section][key] = _PARSERS[typ](parser.get(section, key), f"[{section}] {key}")
            elif default is REQUIRED:
                raise ConfigError(f"missing required key {key!r} in section [{section}]")
            else:
                resolved[section][key] = default

    if overrides:
        if overrides.get("seed") is not None:
            resolved["mc"]["seed"] = int(overrides["seed"])
        if overrides.get("n_paths") is not None:
            resolved["mc"]["n_paths"] = int(overrides["n_paths"])
    _validate_resolved(resolved)
    return resolved


def _validate_resolved(cfg: dict) -> None:
    if cfg["mc"]["n_paths"] < 1:
        raise ConfigError("[mc] n_paths must be >= 1")
    if cfg["grid"]["horizon"] <= 0:
        raise ConfigError("[grid] horizon must be positive")
    if cfg["grid"]["n_steps"] < 2:
        raise ConfigError("[grid] n_steps must be >= 2")
    if cfg["basis"]["degree"] < 1:
        raise ConfigError("[basis] degree must be >= 1")
    family = cfg["model"]["family"]
    if family not in ("lq", "linear", "custom-polynomial"):
        raise ConfigError(f"unknown model family {family!r}")
    for zeta, lam in cfg["model"]["atoms"]:
        if zeta == 0.0:
            raise ConfigError("[model] atoms: jump sizes must be nonzero")
        if lam < 0.0:
            raise ConfigError("[model] atoms: intensities must be >= 0")


# --------------------------------------------------------------------------
# Model families


def _poly(coeffs):
    c = np.asarray(coeffs, dtype=float)

    def ev(x):
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), c)

    return ev


def _poly_deriv(coeffs):
    return _poly(np.polynomial.polynomial.polyder(np.asarray(coeffs, dtype=float)))


def build_model(cfg: dict) -> tuple[ControlledCoefficients, LevyMeasure, float]:
    """Instantiate the configured model family."""
    m = cfg["model"]
    levy = LevyMeasure.from_pairs(m["atoms"])
    x0 = m["x0"]
    family = m["family"]

    def like(value, x, u):
        shape = np.broadcast(np.asarray(x), np.asarray(u)).shape
        return np.broadcast_to(np.asarray(value, dtype=float), shape)

    if family == "lq":
        scale = m["gamma_scale"]
        coeffs = build_lq_coefficients(m["sigma"], levy, lambda zeta: scale * zeta)
        return coeffs, levy, x0

    if family == "linear":
        b0, b1, bu = m["drift_const"], m["drift_x"], m["drift_u"]
        s0, s1, su = m["diff_const"], m["diff_x"], m["diff_u"]
        j0, j1, ju = m["jump_const"], m["jump_x"], m["jump_u"]
        fx, fu, gx = m["run_cost_x"], m["run_cost_u"], m["terminal_x"]
        coeffs = ControlledCoefficients(
            b=lambda t, x, u: b0 + b1 * np.asarray(x, dtype=float) + bu * np.asarray(u, dtype=float),
            sigma=lambda t, x, u: s0 + s1 * np.asarray(x, dtype=float) + su * np.asarray(u, dtype=float),
            gamma=lambda t, x, u, zeta: zeta * (j0 + j1 * np.asarray(x, dtype=float) + ju * np.asarray(u, dtype=float)),
            f=lambda t, x, u: fx * np.asarray(x, dtype=float) + fu * np.asarray(u, dtype=float),
            g=lambda x: gx * np.asarray(x, dtype=float),
            b_x=lambda t, x, u: like(b1, x, u),
            b_u=lambda t, x, u: like(bu, x, u),
            sigma_x=lambda t, x, u: like(s1, x, u),
            sigma_u=lambda t, x, u: like(su, x, u),
            gamma_x=lambda t, x, u, zeta: like(zeta * j1, x, u),
            gamma_u=lambda t, x, u, zeta: like(zeta * ju, x, u),
            f_x=lambda t, x, u: like(fx, x, u),
            f_u=lambda t, x, u: like(fu, x, u),
            g_x=lambda x: np.full_like(np.asarray(x, dtype=float), gx),
            control_set=(m["u_min"], m["u_max"]),
        )
        return coeffs, levy, x0

    # custom-polynomial: drift/diffusion polynomial in x plus linear control,
    # jump coefficient zeta * poly(x), quadratic control cost plus poly(x).
    b_p, s_p, g_p = _poly(m["b_poly"]), _poly(m["sigma_poly"]), _poly(m["gamma_poly"])
    b_d, s_d, g_d = _poly_deriv(m["b_poly"]), _poly_deriv(m["sigma_poly"]), _poly_deriv(m["gamma_poly"])
    f_p, f_d = _poly(m["f_poly"]), _poly_deriv(m["f_poly"])
    gg_p, gg_d = _poly(m["g_poly"]), _poly_deriv(m["g_poly"])
    bu, su = m["b_u"], m["sigma_u"]
    coeffs = ControlledCoefficients(
        b=lambda t, x, u: b_p(x) + bu * np.asarray(u, dtype=float),
        sigma=lambda t, x, u: s_p(x) + su * np.asarray(u, dtype=float),
        gamma=lambda t, x, u, zeta: zeta * like(g_p(x), x, u),
        f=lambda t, x, u: f_p(x) - 0.5 * np.asarray(u, dtype=float) ** 2,
        g=lambda x: gg_p(x),
        b_x=lambda t, x, u: like(b_d(x), x, u),
        b_u=lambda t, x, u: like(bu, x, u),
        sigma_x=lambda t, x, u: like(s_d(x), x, u),
        sigma_u=lambda t, x, u: like(su, x, u),
        gamma_x=lambda t, x, u, zeta: zeta * like(g_d(x), x, u),
        gamma_u=lambda t, x, u, zeta: like(0.0, x, u),
        f_x=lambda t, x, u: like(f_d(x), x, u),
        f_u=lambda t, x, u: -np.asarray(u, dtype=float) * np.ones(np.broadcast(np.asarray(x), np.asarray(u)).shape),
        g_x=lambda x: gg_d(x),
        control_set=(m["u_min"], m["u_max"]),
    )
    return coeffs, levy, x0


def _control_law(name: str, value: float, grid: TimeGrid, bounds) -> OpenLoopLaw:
    if name == "zero":
        return OpenLoopLaw(np.zeros(grid.n_steps), bounds=bounds)
    if name == "constant":
        return OpenLoopLaw(np.full(grid.n_steps, value), bounds=bounds)
    raise ConfigError(f"unknown control {name!r}; expected 'zero' or 'constant'")


def _functional(name: str, grid: TimeGrid, levy: LevyMeasure):
    if name == "bm_squared":
        return Compose(square_map(), (bm_integral(grid, 1.0),))
    if name == "bm_integral":
        return bm_integral(grid, 1.0)
    if name == "jump_squared":
        if not levy.n_atoms:
            raise ConfigError("functional 'jump_squared' needs at least one atom")
        return Compose(square_map(), (jump_integral(grid, levy, np.tile(levy.zetas, (grid.n_steps, 1))),))
    if name == "constant":
        return constant(1.0)
    raise ConfigError(f"unknown functional {name!r}")


def _integrand(name: str, value: float, mode: str, levy: LevyMeasure):
    if mode == "brownian":
        if name == "brownian":
            return lambda b: b.brownian()[:, :-1]
        if name == "constant":
            return lambda b: np.full((b.n_paths, b.grid.n_steps), value)
        raise ConfigError(f"unknown Brownian integrand {name!r}")
    if name == "zeta":
        return lambda b: np.broadcast_to(b.levy.zetas[None, None, :], (b.n_paths, b.grid.n_steps, b.levy.n_atoms))
    if name == "constant":
        return lambda b: np.full((b.n_paths, b.grid.n_steps, b.levy.n_atoms), value)
    raise ConfigError(f"unknown jump integrand {name!r}")


# --------------------------------------------------------------------------
# Experiments


def _digest(arr: np.ndarray) -> str:
    return sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def _run_simulate(cfg, out_dir: Path | None):
    grid = TimeGrid(cfg["grid"]["horizon"], cfg["grid"]["n_steps"])
    coeffs, levy, x0 = build_model(cfg)
    noise = sample_noise(grid, levy, cfg["mc"]["n_paths"], cfg["mc"]["seed"])
    scheme = cfg["simulate"]["scheme"]
    if scheme == "euler":
        law = _control_law(cfg["simulate"]["control"], cfg["simulate"]["control_value"], grid, coeffs.control_set)
        bundle = euler_forward(coeffs, law, noise, x0)
    elif scheme == "closed-form":
        if cfg["model"]["family"] != "linear":
            raise ConfigError("the closed-form scheme needs the 'linear' model family")
        m = cfg["model"]
        lin = LinearCoefficients(
            b0=m["drift_const"],
            b1=m["drift_x"],
            s0=m["diff_const"],
            s1=m["diff_x"],
            g0=levy.zetas * m["jump_const"] if levy.n_atoms else 0.0,
            g1=levy.zetas * m["jump_x"] if levy.n_atoms else 0.0,
        )
        bundle = linear_closed_form(lin, noise, x0)
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")
    terminal = bundle.X[:, -1]
    payload = {
        "mean_terminal": float(terminal.mean()),
        "var_terminal": float(terminal.var(ddof=1)) if terminal.shape[0] > 1 else 0.0,
        "total_jumps": int(noise.jump_counts.sum()),
        "state_digest": _digest(bundle.X),
        "noise_digest": _digest(noise.dB),
    }
    if out_dir is not None:
        dump_paths_csv(bundle, out_dir / "paths.csv", max_paths=cfg["output"]["csv_paths"])
    lines = [
        f"simulated {cfg['mc']['n_paths']} paths on {grid.n_steps} steps ({scheme})",
        f"terminal mean {payload['mean_terminal']:.6g}, variance {payload['var_terminal']:.6g}",
        f"total jump count {payload['total_jumps']}",
    ]
    return EXIT_PASS, payload, lines


def _run_check_duality(cfg, out_dir: Path | None):
    grid = TimeGrid(cfg["grid"]["horizon"], cfg["grid"]["n_steps"])
    _, levy, _ = build_model(cfg)
    d = cfg["duality"]
    mode = d["mode"]
    if mode not in ("brownian", "jump"):
        raise ConfigError(f"[duality] mode must be 'brownian' or 'jump', got {mode!r}")
    F = _functional(d["functional"], grid, levy)
    integrand = _integrand(d["integrand"], d["integrand_value"], mode, levy)
    report = check_duality(
        F,
        integrand,
        mode,
        levy,
        cfg["mc"]["n_paths"],
        cfg["mc"]["seed"],
        grid=grid,
        basis=PolynomialBasis(cfg["basis"]["degree"]),
    )
    payload = report.to_dict()
    if out_dir is not None:
        with open(out_dir / "duality.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    lines = [
        f"duality ({mode}) of {d['functional']} against {d['integrand']}",
        f"lhs {report.lhs:.6g} (se {report.se_lhs:.2g}), rhs {report.rhs:.6g} (se {report.se_rhs:.2g})",
        f"verdict: {'pass' if report.verdict else 'FAIL'} at 3 standard errors",
    ]
    return (EXIT_PASS if report.verdict else EXIT_FAIL), payload, lines


def _run_clark_ocone(cfg, out_dir: Path | None):
    grid = TimeGrid(cfg["grid"]["horizon"], cfg["grid"]["n_steps"])
    _, levy, _ = build_model(cfg)
    c = cfg["clark_ocone"]
    F = _functional(c["functional"], grid, LevyMeasure.empty())
    report = clark_ocone_reconstruct(
        F, cfg["mc"]["n_paths"], cfg["mc"]["seed"], grid=grid, basis=PolynomialBasis(cfg["basis"]["degree"])
    )
    ok = report.l2_error <= c["max_rel_error"]
    payload = dict(report.to_dict(), max_rel_error=c["max_rel_error"], verdict=bool(ok))
    if out_dir is not None:
        with open(out_dir / "clark_ocone.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    lines = [
        f"martingale reconstruction of {c['functional']} on {grid.n_steps} steps",
        f"relative squared-L2 error {report.l2_error:.4g} (threshold {c['max_rel_error']:.4g})",
        f"verdict: {'pass' if ok else 'FAIL'}",
    ]
    return (EXIT_PASS if ok else EXIT_FAIL), payload, lines


def _run_solve_bsde(cfg, out_dir: Path | None):
    grid = TimeGrid(cfg["grid"]["horizon"], cfg["grid"]["n_steps"])
    coeffs, levy, x0 = build_model(cfg)
    noise = sample_noise(grid, levy, cfg["mc"]["n_paths"], cfg["mc"]["seed"])
    basis = PolynomialBasis(cfg["basis"]["degree"])
    law = _control_law(cfg["bsde"]["control"], cfg["bsde"]["control_value"], grid, coeffs.control_set)
    forward = euler_forward(coeffs, law, noise, x0)
    explicit = adjoint_for(law, coeffs, levy, noise, x0, basis=basis, forward=forward)
    regression = adjoint_for(law, coeffs, levy, noise, x0, basis=basis, forward=forward, method="regression")
    distance = relative_l2_dtP(regression.p, explicit.p, grid.dt)
    ok = distance <= cfg["bsde"]["max_rel_distance"]
    payload = {
        "cross_solver_distance": float(distance),
        "max_rel_distance": cfg["bsde"]["max_rel_distance"],
        "p_explicit_digest": _digest(explicit.p),
        "p_regression_digest": _digest(regression.p),
        "p0_mean_explicit": float(explicit.p[:, 0].mean()),
        "verdict": bool(ok),
    }
    if out_dir is not None:
        dump_adjoint_csv(explicit, out_dir / "adjoint.csv", max_paths=cfg["output"]["csv_paths"])
    lines = [
        f"adjoint equation solved two ways on {cfg['mc']['n_paths']} paths",
        f"relative L2(dt x P) distance {distance:.4g} (threshold {cfg['bsde']['max_rel_distance']:.4g})",
        f"verdict: {'pass' if ok else 'FAIL'}",
    ]
    return (EXIT_PASS if ok else EXIT_FAIL), payload, lines


def _run_check_smp(cfg, out_dir: Path | None):
    grid = TimeGrid(cfg["grid"]["horizon"], cfg["grid"]["n_steps"])
    coeffs, levy, x0 = build_model(cfg)
    noise = sample_noise(grid, levy, cfg["mc"]["n_paths"], cfg["mc"]["seed"])
    basis = PolynomialBasis(cfg["basis"]["degree"])
    s = cfg["smp"]
    if s["candidate"] == "lq-opt":
        if cfg["model"]["family"] != "lq":
            raise ConfigError("candidate 'lq-opt' needs the lq model family")
        params = LqParams(
            x0=x0,
            sigma=cfg["model"]["sigma"],
            levy=levy,
            grid=grid,
            n_paths=cfg["mc"]["n_paths"],
            seed=cfg["mc"]["seed"],
            gamma_map=lambda zeta: cfg["model"]["gamma_scale"] * zeta,
            degree=cfg["basis"]["degree"],
        )
        candidate = solve_constrained(params).feedback_law(grid)
    else:
        candidate = _control_law(s["candidate"], s["candidate_value"], grid, coeffs.control_set)
    verdict = check_necessary_condition(
        candidate, coeffs, levy, noise, x0, s["tau_grid"], s["v_grid"], s["eps_grid"], basis=basis
    )
    payload = verdict.to_dict()
    if out_dir is not None:
        verdict.dump_json(out_dir / "smp_verdict.json")
        verdict.dump_csv(out_dir / "smp_verdict.csv")
    worst = float(np.max(verdict.statistic - 3.0 * verdict.statistic_se))
    lines = [
        f"first-order condition over {len(s['tau_grid'])}x{len(s['v_grid'])} cells, eps grid {s['eps_grid']}",
        f"worst statistic margin {worst:.4g} (pass requires <= 0)",
        f"verdict: {'pass' if verdict.passed else 'FAIL'}",
    ]
    return (EXIT_PASS if verdict.passed else EXIT_FAIL), payload, lines


def _run_solve_lq(cfg, out_dir: Path | None):
    grid = TimeGrid(cfg["grid"]["horizon"], cfg["grid"]["n_steps"])
    if cfg["model"]["family"] != "lq":
        raise ConfigError("solve-lq needs the lq model family")
    _, levy, x0 = build_model(cfg)
    it = cfg["iteration"]
    params = LqParams(
        x0=x0,
        sigma=cfg["model"]["sigma"],
        levy=levy,
        grid=grid,
        n_paths=cfg["mc"]["n_paths"],
        seed=cfg["mc"]["seed"],
        gamma_map=lambda zeta: cfg["model"]["gamma_scale"] * zeta,
        degree=cfg["basis"]["degree"],
        max_iters=it["max_iters"],
        damping=it["damping"],
        tol=it["tol"],
    )
    sol = solve_constrained(params)
    comparison = compare_to_unconstrained(sol, params)
    payload = {
        "converged": bool(sol.converged),
        "iterations": len(sol.residual_history),
        "residual_history": [float(r) for r in sol.residual_history],
        "control_norm": float(l2_dtP_norm(sol.u_values, grid.dt)),
        "fbsde_residual": float(sol.fbsde_residual),
        "comparison": comparison.to_dict(),
        "control_digest": _digest(sol.u_values),
    }
    if out_dir is not None:
        dump_feedback_csv(sol, grid, out_dir / "feedback_coefficients.csv")
        dump_residuals_csv(sol, out_dir / "residuals.csv")
        dump_comparison_json(comparison, out_dir / "comparison.json")
    lines = [
        f"constrained solver {'converged' if sol.converged else 'DID NOT converge'} in {len(sol.residual_history)} sweeps",
        f"control L2(dt x P) norm {payload['control_norm']:.4g}, fixed-point residual {sol.fbsde_residual:.3g}",
        f"distance to unconstrained feedback {comparison.control_distance:.4g}, binding fraction {comparison.binding_fraction:.3g}",
    ]
    return (EXIT_PASS if sol.converged else EXIT_FAIL), payload, lines


def _run_convergence_study(cfg, out_dir: Path | None):
    if cfg["model"]["family"] != "linear":
        raise ConfigError("convergence-study needs the 'linear' model family")
    coeffs, levy, x0 = build_model(cfg)
    m = cfg["model"]
    conv = cfg["convergence"]
    rmses = []
    for n_steps in conv["n_steps_list"]:
        grid = TimeGrid(cfg["grid"]["horizon"], int(n_steps))
        noise = sample_noise(grid, levy, cfg["mc"]["n_paths"], cfg["mc"]["seed"])
        law = OpenLoopLaw(np.zeros(grid.n_steps), bounds=coeffs.control_set)
        eul = euler_forward(coeffs, law, noise, x0)
        lin = LinearCoefficients(
            b0=m["drift_const"],
            b1=m["drift_x"],
            s0=m["diff_const"],
            s1=m["diff_x"],
            g0=levy.zetas * m["jump_const"] if levy.n_atoms else 0.0,
            g1=levy.zetas * m["jump_x"] if levy.n_atoms else 0.0,
        )
        closed = linear_closed_form(lin, noise, x0)
        rmses.append(float(np.sqrt(np.mean((eul.X[:, -1] - closed.X[:, -1]) ** 2))))
    ratios = [rmses[i] / rmses[i + 1] for i in range(len(rmses) - 1)]
    ok = all(conv["ratio_low"] <= r <= conv["ratio_high"] for r in ratios)
    payload = {
        "n_steps_list": [int(n) for n in conv["n_steps_list"]],
        "rmse": rmses,
        "ratios": ratios,
        "ratio_low": conv["ratio_low"],
        "ratio_high": conv["ratio_high"],
        "verdict": bool(ok),
    }
    if out_dir is not None:
        with open(out_dir / "convergence.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    lines = [
        "terminal RMSE between the Euler scheme and the closed form on common noise",
        "rmse " + ", ".join(f"{n}: {r:.6g}" for n, r in zip(payload["n_steps_list"], rmses)),
        f"halving ratios {', '.join(f'{r:.3f}' for r in ratios)} within [{conv['ratio_low']}, {conv['ratio_high']}]: "
        + ("pass" if ok else "FAIL"),
    ]
    return (EXIT_PASS if ok else EXIT_FAIL), payload, lines


_RUNNERS = {
    "simulate": _run_simulate,
    "check-duality": _run_check_duality,
    "clark-ocone": _run_clark_ocone,
    "solve-bsde": _run_solve_bsde,
    "check-smp": _run_check_smp,
    "solve-lq": _run_solve_lq,
    "convergence-study": _run_convergence_study,
}


@dataclass
class RunResult:
    exit_code: int
    report: dict
    report_path: Path | None


def run(cfg: dict, out_dir=None, write: bool = True) -> RunResult:
    """Execute the configured experiment; writes report.json and summary.txt.

    Exit code 0 on verdict pass, 1 on verdict fail; configuration problems
    raise ConfigError (exit 2 at the CLI) and numerical failures raise the
    package errors (exit 3).
    """
    kind = cfg["experiment"]["kind"]
    if kind not in _RUNNERS:
        raise ConfigError(f"unknown experiment kind {kind!r}")
    out_path = None
    if write:
        if out_dir is None:
            raise ConfigError("an output directory is required when writing reports")
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    exit_code, payload, lines = _RUNNERS[kind](cfg, out_path)
    runtime = time.perf_counter() - started
    report = {
        "version": __version__,
        "kind": kind,
        "seed": cfg["mc"]["seed"],
        "config": cfg,
        "runtime_seconds": runtime,
        "payload": payload,
    }
    report_path = None
    if write:
        report_path = out_path / "report.json"
        with open(report_path, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        with open(out_path / "summary.txt", "w") as fh:
            fh.write(f"experiment: {kind} (seed {cfg['mc']['seed']}, version {__version__})\n")
            for line in lines:
                fh.write(line + "\n")
            fh.write(f"runtime: {runtime:.2f} s\n")
            fh.write(f"exit code: {exit_code}\n")
    return RunResult(exit_code=exit_code, report=report, report_path=report_path)


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True)


def replay(report_path) -> int:
    """Re-run the embedded config and demand a bit-identical numeric payload."""
    path = Path(report_path)
    if not path.is_file():
        raise ConfigError(f"report file {path} not found")
    try:
        with open(path) as fh:
            report = json.load(fh)
        cfg = report["config"]
        recorded = report["payload"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"report file {path} is not a valid run report: {exc}") from exc
    result = run(cfg, write=False)
    if _canonical(result.report["payload"]) != _canonical(recorded):
        raise ReplayMismatch("replayed payload differs from the recorded report")
    return EXIT_PASS
