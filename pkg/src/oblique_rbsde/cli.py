"""Batch front-end: ``oblique-rbsde {validate,solve,sweep,verify,risk}``.

Exit codes: 0 success, 2 invalid problem or configuration, 3 solver
failure, 4 verification gap beyond tolerance.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .coupled import solve_coupled_rbsde
from .detgrid import StiffnessError
from .mc_engine import SimulationError
from .model import ProblemValidationError, StructuralError, check_generator, validate_cost_matrix
from .penalization import ConvergenceError, Numerics, PicardError, penalty_sweep, solve_rbsde
from .problem_io import load_problem
from .reporting import file_digest, write_csv, write_json
from .risk import check_risk_problem, verify_risk_optimality
from .switching import ChatteringError, EnumerationCapError, certify_optimal_strategy, verify_representation

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_GAP = 0, 2, 3, 4
SOLVER_ERRORS = (ConvergenceError, PicardError, StiffnessError, SimulationError, ChatteringError,
                 EnumerationCapError, FloatingPointError)

DEFAULTS = {"paths": 10_000, "steps": 2000, "seed": None, "m": "1,2,4,8,16,32,64,128,256", "slack_tol": 1e-2,
            "max_switches": 2, "beta": None, "mode": None, "workers": 1, "basis_degree": None,
            "verification": "dp", "tol": None, "start_mode": None, "freeze": "full", "regression": "polynomial"}


class ConfigError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oblique-rbsde", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("validate", "solve", "sweep", "verify", "risk"):
        s = sub.add_parser(name)
        s.add_argument("--problem", required=True)
        s.add_argument("--config", help="JSON file with option defaults; flags win")
        s.add_argument("--log-level", default="WARNING")
        if name == "validate":
            s.add_argument("--level", default="A4", choices=("A2", "A3", "A4"))
            continue
        s.add_argument("--out", required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--paths", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--m", help="comma-separated penalty weights")
        s.add_argument("--slack-tol", type=float)
        s.add_argument("--max-switches", type=int)
        s.add_argument("--beta", type=float)
        s.add_argument("--mode", choices=("deterministic", "mc"))
        s.add_argument("--workers", type=int)
        s.add_argument("--basis-degree", type=int)
        s.add_argument("--regression", choices=("polynomial", "kernel"))
        s.add_argument("--start-mode", type=int)
        if name == "verify":
            s.add_argument("--verification", choices=("dp", "enumerate"))
            s.add_argument("--tol", type=float)
        if name == "solve":
            s.add_argument("--freeze", choices=("full", "off_diagonal"))
    return p


def _resolve(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    try:
        cfg["m"] = [float(v) for v in str(cfg["m"]).split(",")] if not isinstance(cfg["m"], list) else \
            [float(v) for v in cfg["m"]]
    except ValueError as exc:
        raise ConfigError(f"bad --m list: {exc}") from exc
    for key in ("paths", "steps", "workers", "slack_tol"):
        if not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive")
    if any(m <= 0 for m in cfg["m"]):
        raise ConfigError("penalty weights must be positive")
    return cfg


def _numerics(cfg, problem) -> Numerics:
    force_mc = False
    if cfg["mode"] == "mc":
        force_mc = problem.deterministic
    elif cfg["mode"] == "deterministic" and not problem.deterministic:
        raise ConfigError("--mode deterministic needs a problem with deterministic dynamics")
    stochastic = force_mc or not problem.deterministic
    if stochastic and cfg["seed"] is None:
        raise ConfigError("a seed is required for Monte Carlo runs (--seed)")
    return Numerics(num_paths=int(cfg["paths"]), steps=int(cfg["steps"]), seed=cfg["seed"],
                    basis_degree=cfg["basis_degree"], workers=int(cfg["workers"]), force_mc=force_mc,
                    m_start=cfg["m"][0], regression=cfg["regression"])


def _manifest(out: Path, command: str, args, cfg: dict, numerics=None, status="ok"):
    # the worker count never changes results, so it stays out of the manifest
    info = {"command": command, "code_version": __version__, "problem_file": Path(args.problem).name,
            "problem_sha256": file_digest(args.problem),
            "config": {k: v for k, v in cfg.items() if k != "workers"}, "seed": cfg.get("seed"),
            "status": status}
    if numerics is not None:
        info["numerics"] = {k: v for k, v in asdict(numerics).items() if k != "workers"}
    write_json(out / "manifest.json", info)


def _trace_rows(sol):
    nodes = sol.grid.nodes
    y = sol.y_reflected.mean(axis=1)
    yr = sol.y.mean(axis=1)
    k = sol.k_cum.mean(axis=1)
    for j, t in enumerate(nodes):
        yield [t, *y[j], *yr[j], *k[j]]


def _trace_header(n):
    return (["t"] + [f"Y{i}" for i in range(n)] + [f"Ym{i}" for i in range(n)] + [f"K{i}" for i in range(n)])


def cmd_validate(args) -> int:
    problem, risk, raw = load_problem(args.problem)
    rep = validate_cost_matrix(problem.cost, args.level)
    lines = rep.lines()
    gen_rep = check_generator(problem.gen, problem.d, horizon=problem.horizon)
    lines += gen_rep.lines()
    ok = rep.passed and gen_rep.passed
    if risk is not None:
        r = check_risk_problem(risk)
        lines += r.lines()
        ok = ok and r.passed
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_INVALID


def cmd_solve(args, cfg, problem, out: Path) -> int:
    numerics = _numerics(cfg, problem)
    _manifest(out, "solve", args, cfg, numerics)
    try:
        if problem.gen.coupling == "coupled":
            sol, trace = solve_coupled_rbsde(problem, numerics, beta=cfg["beta"], m_max=cfg["m"][-1],
                                             slack_tol=cfg["slack_tol"], freeze=cfg["freeze"])
            write_csv(out / "fixed_point.csv", ["iterate", "delta", "ratio", "sup_delta"], trace.rows())
        else:
            sol = solve_rbsde(problem, numerics, m_max=cfg["m"][-1], slack_tol=cfg["slack_tol"])
    except SOLVER_ERRORS as exc:
        rep = getattr(exc, "report", None)
        blob = {"error": type(exc).__name__, "message": str(exc)}
        if rep is not None and hasattr(rep, "m_values"):
            blob.update({"m_values": rep.m_values, "slack_sup": rep.slack_sup})
        write_json(out / "diagnostics.json", blob)
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    write_csv(out / "trace.csv", _trace_header(problem.n), _trace_rows(sol))
    write_json(out / "diagnostics.json", sol.diagnostics)
    summary = {"Y0": sol.value0, "Y0_penalized": sol.y0_raw, "Y0_se": sol.y0_se, "m": sol.m,
               "slack_sup": sol.slack_sup, "certified": bool(sol.diagnostics.get("certified", False)),
               "unique_regime": problem.unique_regime}
    write_json(out / "summary.json", summary)
    print(json.dumps({"Y0": [float(v) for v in sol.value0], "m": sol.m, "slack_sup": sol.slack_sup}))
    return EXIT_OK


def cmd_sweep(args, cfg, problem, out: Path) -> int:
    numerics = _numerics(cfg, problem)
    _manifest(out, "sweep", args, cfg, numerics)
    try:
        rep = penalty_sweep(problem, cfg["m"], numerics)
    except SOLVER_ERRORS as exc:
        write_json(out / "sweep.json", {"error": type(exc).__name__, "message": str(exc)})
        return EXIT_SOLVER
    header = ["m", "slack_sup"] + [f"Y0_{i}" for i in range(problem.n)] + ["slope"]
    write_csv(out / "sweep.csv", header, rep.rows())
    write_csv(out / "plot_slack_vs_m.csv", ["x", "y"], zip(rep.m_values, rep.slack_sup))
    write_json(out / "sweep.json", {"m_values": rep.m_values, "slack_sup": rep.slack_sup, "slope": rep.slope,
                                    "violations": rep.violations, "max_violation": rep.max_violation,
                                    "sup_norm": rep.sup_norm, "verdict": rep.verdict})
    print(json.dumps({"slope": rep.slope, "violations": rep.violations, "verdict": rep.verdict}))
    return EXIT_OK if rep.verdict == "converging" else EXIT_GAP


def cmd_verify(args, cfg, problem, out: Path) -> int:
    numerics = _numerics(cfg, problem)
    _manifest(out, "verify", args, cfg, numerics)
    deterministic = problem.deterministic and not numerics.force_mc
    method = cfg["verification"] if deterministic else "enumerate"
    modes = range(problem.n) if cfg["start_mode"] is None else [int(cfg["start_mode"])]
    try:
        sol = solve_rbsde(problem, numerics, m_max=cfg["m"][-1], slack_tol=cfg["slack_tol"])
        results, failed = [], False
        plot = []
        for i in modes:
            rep = verify_representation(problem, sol, i, numerics, verification=method,
                                        max_switches=int(cfg["max_switches"]), tol=cfg["tol"])
            ext = certify_optimal_strategy(problem, sol, i, numerics)
            tol = cfg["tol"] if cfg["tol"] is not None else (1e-3 if deterministic else 3.0 * max(
                float(sol.y0_se[i]), ext.se))
            ok = abs(rep.gap) <= (tol if method == "dp" else np.inf) and rep.lower_bound_ok and abs(ext.gap) <= tol
            failed |= not ok
            if rep.table:
                write_csv(out / f"representation_mode{i}.csv", ["digest", "U0", "se", "gap"], rep.csv_rows())
            digest = ext.strategy.digest() if hasattr(ext.strategy, "digest") else "per-path"
            results.append({"mode": i, "Y0": rep.rbsde_value, "oracle_min": rep.oracle_min,
                            "minimizer": rep.minimizer, "gap": rep.gap, "method": rep.method,
                            "lower_bound_violations": len(rep.lower_bound_violations),
                            "extracted": digest, "U_star": ext.value, "extraction_gap": ext.gap,
                            "switch_count": ext.max_switches, "tolerance": tol, "pass": ok})
            plot.append([sol.grid.steps, i, rep.gap])
        if deterministic and method == "dp":
            for steps in (sol.grid.steps // 4, sol.grid.steps // 2):
                coarse = Numerics(**{**asdict(numerics), "steps": max(steps, 1)})
                try:
                    s2 = solve_rbsde(problem, coarse, m_max=cfg["m"][-1], slack_tol=cfg["slack_tol"])
                except SOLVER_ERRORS:
                    continue
                for i in modes:
                    plot.append([coarse.steps, i, verify_representation(problem, s2, i, coarse).gap])
        plot.sort()
    except SOLVER_ERRORS as exc:
        write_json(out / "verify.json", {"error": type(exc).__name__, "message": str(exc)})
        return EXIT_SOLVER
    write_json(out / "verify.json", {"modes": results, "m": sol.m, "slack_sup": sol.slack_sup})
    write_csv(out / "plot_gap_vs_grid.csv", ["x", "mode", "y"], plot)
    print(json.dumps([{k: r[k] for k in ("mode", "gap", "extraction_gap", "pass")} for r in results]))
    return EXIT_GAP if failed else EXIT_OK


def cmd_risk(args, cfg, problem, risk, out: Path) -> int:
    if risk is None:
        raise ConfigError("the problem file has no risk section")
    numerics = _numerics(cfg, problem)
    _manifest(out, "risk", args, cfg, numerics)
    mode = 0 if cfg["start_mode"] is None else int(cfg["start_mode"])
    try:
        rep = verify_risk_optimality(risk, numerics, start_mode=mode, max_switches=int(cfg["max_switches"]),
                                     m_max=cfg["m"][-1], slack_tol=cfg["slack_tol"])
    except SOLVER_ERRORS as exc:
        write_json(out / "risk.json", {"error": type(exc).__name__, "message": str(exc)})
        return EXIT_SOLVER
    write_json(out / "risk.json", {**rep.to_json(), "diagnostics": rep.diagnostics})
    write_csv(out / "risk_strategies.csv", ["digest", "logJ", "se"], rep.table)
    write_csv(out / "plot_gap_vs_grid.csv", ["x", "y"], [[numerics.steps, rep.gap]])
    deterministic = problem.deterministic and not numerics.force_mc
    tol = 1e-3 if deterministic else 3.0 * rep.se
    print(json.dumps(rep.to_json()))
    return EXIT_OK if abs(rep.gap) <= tol and rep.lower_bound_violations == 0 else EXIT_GAP


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        if args.command == "validate":
            return cmd_validate(args)
        cfg = _resolve(args)
        problem, risk, _ = load_problem(args.problem)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "solve":
            return cmd_solve(args, cfg, problem, out)
        if args.command == "sweep":
            return cmd_sweep(args, cfg, problem, out)
        if args.command == "verify":
            return cmd_verify(args, cfg, problem, out)
        return cmd_risk(args, cfg, problem, risk, out)
    except (ProblemValidationError, StructuralError, ConfigError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
