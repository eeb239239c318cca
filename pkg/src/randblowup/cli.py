"""Command-line experiment runner.

Subcommands: profiles, simulate, ensemble, analyze, validate. Exit codes:
0 success, 1 run error, 2 config error, 3 validation failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import pickle
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, with_overrides
from .evolve import TOWNES_MASS, conserved, exact_S, forced_difference_evolve, propagate, save_trajectory
from .imethod import almost_conservation_report, save_report
from .modulation import (ModulationState, TailTable, _conditions, _directions, _Frame, _support, build_series,
                         construct_ansatz, decompose, fit_loglog, load_series_table, save_series)
from .probstats import EnsembleConfig, run_ensemble, save_ensemble, tail_fit
from .profiles import ProfileTable, ground_state_residual, radial_energy, radial_mass, solve_ground_state
from .radial import profile_hash
from .randomize import Window, default_K_max, make_profile, sample
from .spectral import ComplexField, Grid2D, field_from_function, load_field, make_grid, set_fft_workers

EXIT_OK, EXIT_RUN, EXIT_CONFIG, EXIT_VALIDATION = 0, 1, 2, 3
TABLE_FILE = "table.pkl"
TAILS_FILE = "tails.pkl"


class MissingArtifactError(FileNotFoundError):
    pass


class ProjectionError(RuntimeError):
    pass


# Profiles ------------------------------------------------------------------------------

def table_hash(table: ProfileTable) -> str:
    """Combined content hash of every tabulated profile."""
    h = hashlib.sha256()
    for p in table.profiles:
        h.update(profile_hash(p).encode())
    return h.hexdigest()[:16]


def profiles_dir(cfg: RunConfig) -> Path:
    return Path(cfg.outputs.dir) / "profiles"


def load_profiles(cfg: RunConfig) -> tuple[ProfileTable, TailTable]:
    d = profiles_dir(cfg)
    missing = [str(d / f) for f in (TABLE_FILE, TAILS_FILE) if not (d / f).exists()]
    if missing:
        raise MissingArtifactError(f"missing prerequisite artifacts {missing}; run the 'profiles' subcommand first")
    with open(d / TABLE_FILE, "rb") as fh:
        table = pickle.load(fh)
    with open(d / TAILS_FILE, "rb") as fh:
        tails = pickle.load(fh)
    p = cfg.profile
    if abs(table.b_max - p.b_max) > 1e-12 or abs(table.eta - p.eta) > 1e-15 or abs(table.db - p.db) > 1e-15:
        raise MissingArtifactError(f"profile table in {d} was built with different (b_max, eta, db)")
    return table, tails


def cmd_profiles(cfg: RunConfig) -> dict:
    p = cfg.profile
    t0 = time.time()
    table = ProfileTable.build(b_max=p.b_max, db=p.db, eta=p.eta)
    tails = TailTable.build(table, a=p.a, eta=p.eta)
    d = profiles_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / TABLE_FILE, "wb") as fh:
        pickle.dump(table, fh)
    with open(d / TAILS_FILE, "wb") as fh:
        pickle.dump(tails, fh)
    summary = {"b_values": table.b_values.tolist(), "eta": p.eta, "db": p.db, "a": p.a,
               "mass_excess": [radial_mass(q) - radial_mass(table.q) for q in table.profiles[1:]],
               "tail_b": tails.b_values.tolist(), "Gamma_b": tails.gammas.tolist(),
               "table_hash": table_hash(table), "version": __version__, "seconds": time.time() - t0}
    (d / "profiles.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


# Initial data ----------------------------------------------------------------------------

def eps0_field(cfg: RunConfig, grid: Grid2D) -> Optional[np.ndarray]:
    """eps0 sampled at the rescaled grid points ``y = (x - x0)/lambda0``."""
    e = cfg.data.eps0
    if e.kind == "zero":
        return None
    X, Y = grid.mesh
    lam, x0 = cfg.data.lambda0, cfg.data.x0
    y1, y2 = (X - x0[0]) / lam, (Y - x0[1]) / lam
    if e.kind == "gaussian-bump":
        return e.amplitude * np.exp(-(y1**2 + y2**2) / e.width**2).astype(np.complex128)
    f = load_field(e.path)
    if f.grid.n != grid.n:
        raise ConfigError(f"eps0 file {e.path} has n={f.grid.n}, run grid has n={grid.n}", path="data.eps0.path")
    return np.array(f.physical().values)


def project_eps(eps: np.ndarray, grid: Grid2D, table: ProfileTable, lam: float, b: float, x0,
                rtol: float = 1e-10) -> np.ndarray:
    """Remove from ``eps`` its components along the five pairing directions.

    The pairing is ``Re int conj(h) eps dy`` over the profile support, so a
    modified Gram-Schmidt basis of the directions gives an exact projection.
    """
    fr = _Frame(grid, lam, x0, _support(table, b))
    _, H = _directions(table, b, fr)
    basis = []
    for h in H:
        v = h.copy()
        for e in basis:
            v = v - fr.dy * np.real(np.vdot(e, v)) * e
        nv = np.sqrt(fr.dy * np.sum(np.abs(v) ** 2))
        if nv < rtol * np.sqrt(fr.dy * np.sum(np.abs(h) ** 2)):
            raise ProjectionError("pairing directions are degenerate on this grid")
        basis.append(v / nv)
    out = eps.copy()
    sub = out[fr.sel]
    for _ in range(2):  # second sweep removes roundoff left by the first
        for e in basis:
            sub = sub - fr.dy * np.real(np.vdot(e, sub)) * e
    out[fr.sel] = sub
    return out


def prepare_a0(cfg: RunConfig, table: ProfileTable, grid: Optional[Grid2D] = None,
               eps: Optional[np.ndarray] = None) -> tuple[ComplexField, dict]:
    """``a0 = (1/lam0)(Q~_b0 + eps0)((x - x0)/lam0) e^{-i gamma0}`` with eps0 projected.

    ``eps`` (rescaled-frame samples on ``grid``) overrides the config
    descriptor. When ``data.mass_ratio`` is set, a0 is rescaled to that
    multiple of ``||Q||^2``; the report then lists the pairings of the
    rescaled field, which no longer vanish.
    """
    grid = grid or make_grid(cfg.grid.n, cfg.grid.L)
    d, b0 = cfg.data, cfg.profile.b0
    lam, x0, gam = d.lambda0, tuple(d.x0), d.gamma0
    eps = eps0_field(cfg, grid) if eps is None else eps
    base = construct_ansatz(grid, table, lam, b0, x0, gam)
    a = np.array(base.values)
    eps_norm = 0.0
    if eps is not None:
        eps_p = project_eps(np.asarray(eps, dtype=np.complex128), grid, table, lam, b0, x0)
        a = a + eps_p * np.exp(-1j * gam) / lam
        eps_norm = float(np.sqrt(grid.cell_area * np.sum(np.abs(eps_p) ** 2)) / lam)
    p = np.array([lam, b0, x0[0], x0[1], gam])
    c, hn = _conditions(a, grid, table, p, _support(table, b0))
    scale = 1.0
    a0 = ComplexField(grid, a)
    if d.mass_ratio is not None:
        scale = float(np.sqrt(d.mass_ratio * TOWNES_MASS / conserved(a0).M))
        a0 = a0.scale(scale)
    cs, hs = _conditions(a0.values, grid, table, p, _support(table, b0))
    cons = conserved(a0)
    excess = cons.M - TOWNES_MASS
    gamma_proxy = float(np.exp(-np.pi / b0))
    report = {
        "pairings_before_rescale": (c / hn).tolist(),
        "pairings": (cs / hs).tolist(),
        "orthogonality_holds": bool(np.all(np.abs(cs / hs) < 1e-10)),
        "mass_scale": scale,
        "M": cons.M, "E": cons.E, "P": list(cons.P),
        "mass_excess": excess, "alpha_star": cfg.alpha_star,
        "mass_excess_in_window": bool(0 < excess < cfg.alpha_star),
        "energy_condition": {"value": float(np.sqrt(lam) * abs(cons.E)), "holds": bool(np.sqrt(lam) * abs(cons.E) <= 1)},
        "momentum_condition": {"value": float(np.sqrt(lam) * np.hypot(*cons.P)),
                               "holds": bool(np.sqrt(lam) * np.hypot(*cons.P) <= 1)},
        "eps0_l2": eps_norm,
        "smallness_monitor": {"value": eps_norm, "bound": gamma_proxy ** 0.75,
                              "holds": bool(eps_norm <= gamma_proxy ** 0.75),
                              "label": "regime-relaxed monitor (Gamma_b0 ~ exp(-pi/b0))"},
        "regime": cfg.regime_check(),
    }
    return a0, report


# Simulation ------------------------------------------------------------------------------

def run_dir(cfg: RunConfig, kind: str) -> Path:
    return Path(cfg.outputs.dir) / f"{kind}_{cfg.config_hash()}"


def base_manifest(cfg: RunConfig, table: Optional[ProfileTable] = None) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": cfg.data.seed,
            "version": __version__, "profile_hash": table_hash(table) if table is not None else None}


def random_spec(cfg: RunConfig, grid: Grid2D):
    s = cfg.data.spec
    K = s.K_max if s.K_max is not None else default_K_max(grid)
    return make_profile(s.shape, K, s.normalize, Window(s.window_kind, s.overlap), s.log_power)


def check_regime(cfg: RunConfig) -> None:
    rc = cfg.regime_check()
    if not rc["holds"] and not rc["desk_scale_override"]:
        raise ConfigError(f"lambda0={cfg.data.lambda0} violates lambda0 <= exp(-exp(2 pi/(3 b0))) "
                          f"(log bound {rc['log_bound']:.4g}); pass --override-desk-scale or set "
                          "data.desk_scale_override", path="data.lambda0")


def cmd_simulate(cfg: RunConfig) -> dict:
    check_regime(cfg)
    table, tails = load_profiles(cfg)
    grid = make_grid(cfg.grid.n, cfg.grid.L)
    a0, report = prepare_a0(cfg, table, grid)
    spec = random_spec(cfg, grid)
    f = sample(spec, cfg.data.seed, grid).field.scale(cfg.data.alpha)
    traj = forced_difference_evolve(a0 + f, f, cfg.solver.to_solver())
    out = run_dir(cfg, "run")
    man = base_manifest(cfg, table)
    man.update({"a0_report": report, "random_spec": spec.to_dict(grid), "labels": {
        "Gamma_b_scaled_bounds": "regime-relaxed monitors"}})
    save_trajectory(traj, out, man)
    guess = ModulationState(cfg.data.lambda0, cfg.profile.b0, tuple(cfg.data.x0), cfg.data.gamma0)
    series = build_series(traj.snap_times, traj.a_snapshots(), table, guess)
    save_series(series, out / "series.csv", table, tails)
    lam = np.interp(traj.snap_times, traj.times, traj.lam)
    rep = almost_conservation_report(traj.snap_times, lam, traj.a_snapshots(), a0,
                                     cfg.imethod.s, cfg.imethod.delta)
    save_report(rep, out)
    summary = {"dir": str(out), "event": traj.event, "steps": int(len(traj.times) - 1),
               "series_event": series.event, "n_decomposed": int(len(series.t)),
               "drift": traj.drift(), "imethod": rep.summary()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return summary


def cmd_ensemble(cfg: RunConfig, workers: int = 1) -> dict:
    e = cfg.ensemble
    grid = make_grid(e.grid_n, e.grid_L)
    s = cfg.data.spec
    K = s.K_max if s.K_max is not None else default_K_max(grid)
    spec = make_profile(s.shape, K, s.normalize, Window(s.window_kind, s.overlap), s.log_power)
    ec = EnsembleConfig(spec, grid, e.n_samples, e.seed_base, e.observables, e.T_obs, e.n_times, e.q, e.r, e.eps)
    res = run_ensemble(ec, workers)
    fits = {}
    for name in ec.observables:
        v = res.values[name]
        v = v[np.isfinite(v)]
        if len(v) >= 100:
            fits[name] = tail_fit(v).summary()
    out = save_ensemble(res, cfg.outputs.dir, fits)
    return {"dir": str(out), "nu": res.nu, "stats": {n: res.stats(n) for n in ec.observables}, "fits": fits}


# Analysis --------------------------------------------------------------------------------

def analyze_run(path: Path) -> dict:
    path = Path(path)
    for name in ("manifest.json", "conserved.csv", "series.csv"):
        if not (path / name).exists():
            raise MissingArtifactError(f"missing prerequisite artifact {path / name}; run 'simulate' first")
    man = json.loads((path / "manifest.json").read_text())
    ser = load_series_table(path / "series.csv")
    t, lam = ser["t"] + man.get("t0", 0.0), ser["lambda"]
    out = {"run": str(path), "event": man["event"], "n_series": int(len(t))}
    try:
        fit = fit_loglog(t, lam)
        out["loglog_fit"] = {"T_fit": fit.loglog.T, "residual": fit.loglog.residual, "scale": fit.loglog.scale,
                             "sqrt_T_fit": fit.sqrt_law.T, "sqrt_residual": fit.sqrt_law.residual,
                             "preferred": fit.preferred,
                             "note": "model comparison only; the two laws differ asymptotically"}
    except ValueError as exc:
        out["loglog_fit"] = {"skipped": str(exc)}
    imj = path / "imethod.json"
    if imj.exists():
        im = json.loads(imj.read_text())
        out["alpha1"] = {"energy": im.get("alpha1_energy"), "momentum": im.get("alpha1_momentum"),
                         "energy_fit": im.get("energy"), "momentum_fit": im.get("momentum")}
    (path / "analysis.json").write_text(json.dumps(out, indent=2, sort_keys=True))
    return out


def cmd_analyze(cfg: RunConfig) -> dict:
    path = run_dir(cfg, "run")
    return analyze_run(path)


# Validation ------------------------------------------------------------------------------

def _check(name: str, value: float, limit: float) -> dict:
    return {"name": name, "value": float(value), "limit": limit, "pass": bool(value < limit)}


def validation_suite(table: Optional[ProfileTable] = None) -> list:
    """Fast oracle checks: S-solution, plane wave, ground state, decompose-recover."""
    res = []
    q = table.q if table is not None else solve_ground_state()
    # ground state
    res.append(_check("ground_state_residual", float(np.max(np.abs(ground_state_residual(q)))), 1e-10))
    res.append(_check("ground_state_energy", abs(radial_energy(q)), 1e-8))
    # plane wave: u = A e^{i(k.x - (|k|^2 - |A|^2) t)}
    g = make_grid(64, np.pi * 4)
    k, A, T = (1.0, 0.5), 0.7, 0.5
    u0 = field_from_function(g, lambda x, y: A * np.exp(1j * (k[0] * x + k[1] * y)) + 0j)
    u = propagate(u0, T, 200)
    ex = u0.values * np.exp(-1j * (k[0] ** 2 + k[1] ** 2 - A**2) * T)
    res.append(_check("plane_wave_error", float(np.max(np.abs(u.values - ex))), 1e-10))
    # S-solution over a short window
    gs = make_grid(256, 12.0)
    s0, s1 = exact_S(-1.0, gs, q), exact_S(-0.875, gs, q)
    err = (propagate(s0, 0.125, 250) - s1).norm() / s1.norm()
    res.append(_check("S_solution_rel_error", err, 1e-4))
    # decompose-recover on an exact ansatz
    if table is not None:
        grid = make_grid(256, 10.0)
        p_true = (0.8, 0.1, (0.3, -0.1), 1.0)
        f = construct_ansatz(grid, table, *p_true)
        st = decompose(f, ModulationState(0.75, 0.09, (0.25, -0.05), 0.9), table)
        perr = float(np.max(np.abs(st.params() - np.array([0.8, 0.1, 0.3, -0.1, 1.0]))))
        res.append(_check("decompose_recover_error", perr, 1e-8))
    return res


def cmd_validate(cfg: RunConfig) -> tuple[dict, bool]:
    try:
        table, _ = load_profiles(cfg)
    except MissingArtifactError:
        table = None
    checks = validation_suite(table)
    ok = all(c["pass"] for c in checks)
    out = Path(cfg.outputs.dir) / f"validate_{cfg.config_hash()}"
    out.mkdir(parents=True, exist_ok=True)
    summary = {"pass": [c["name"] for c in checks if c["pass"]],
               "fail": [c["name"] for c in checks if not c["pass"]], "checks": checks,
               "decompose_skipped": table is None, **base_manifest(cfg, table)}
    (out / "validate.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary, ok


# Entry point -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="randblowup", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("profiles", "simulate", "ensemble", "analyze", "validate"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML config file (defaults when omitted)")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--seed", type=int, help="seed override (unsigned 64-bit)")
        p.add_argument("--threads", type=int, default=1, help="FFT and ensemble worker threads")
        p.add_argument("--override-desk-scale", action="store_true",
                       help="acknowledge the desk-scale relaxation of the lambda0 condition")
        p.add_argument("--run", type=Path, help="run directory for analyze (defaults to the config's run)")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = with_overrides(cfg, args.seed, args.override_desk_scale, args.out)
        if args.threads < 1:
            raise ConfigError("must be at least 1", path="--threads")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    set_fft_workers(args.threads)
    try:
        if args.command == "profiles":
            result = cmd_profiles(cfg)
        elif args.command == "simulate":
            result = cmd_simulate(cfg)
        elif args.command == "ensemble":
            result = cmd_ensemble(cfg, args.threads)
        elif args.command == "analyze":
            result = analyze_run(args.run) if args.run else cmd_analyze(cfg)
        else:
            result, ok = cmd_validate(cfg)
            print(json.dumps({"pass": result["pass"], "fail": result["fail"]}, indent=2))
            return EXIT_OK if ok else EXIT_VALIDATION
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # reported as a run error with the exception type
        print(f"run error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
