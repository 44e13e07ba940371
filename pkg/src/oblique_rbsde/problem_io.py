"""JSON problem files.

Coefficients are written as expressions in ``t``, the current state
``x1 .. xd``, the value coordinates ``y1 .. yn`` (generator only) and
``z1 .. zd`` (``f`` only), parsed with sympy and compiled to numpy.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import sympy

from .model import (CostMatrix, Deterministic, GeneratorSpec, Markovian, ProblemValidationError, RbsdeProblem,
                    StructuralError, TerminalCondition)
from .risk import RiskProblem

SCHEMA_VERSION = 1

_NAMES = {"exp": sympy.exp, "log": sympy.log, "sin": sympy.sin, "cos": sympy.cos, "tanh": sympy.tanh,
          "sqrt": sympy.sqrt, "Abs": sympy.Abs, "Min": sympy.Min, "Max": sympy.Max, "pi": sympy.pi}


class ProblemFileError(ProblemValidationError):
    pass


def _symbols(prefix, count):
    return [sympy.Symbol(f"{prefix}{j + 1}") for j in range(count)]


def _parse(text, allowed, where):
    local = dict(_NAMES)
    local.update({s.name: s for s in allowed})
    try:
        expr = sympy.sympify(str(text), locals=local)
    except (sympy.SympifyError, TypeError, SyntaxError) as exc:
        raise ProblemFileError(f"{where}: cannot parse {text!r}: {exc}") from exc
    extra = expr.free_symbols - set(allowed)
    if extra:
        names = ", ".join(sorted(s.name for s in extra))
        raise ProblemFileError(f"{where}: unknown symbols {names}")
    return expr


def _compile(exprs, args):
    """Vectorised evaluator returning an array of shape ``broadcast + (len(exprs),)``."""
    fns = [sympy.lambdify(args, e, "numpy") for e in exprs]

    def call(*vals):
        outs = [np.asarray(fn(*vals), dtype=float) for fn in fns]
        shape = np.broadcast_shapes(*[o.shape for o in outs]) if outs else ()
        return np.stack([np.broadcast_to(o, shape) for o in outs], axis=-1)

    return call


def _state_columns(path, d):
    if path is None:
        return [0.0] * d
    last = np.asarray(path)[:, -1, :]
    return [last[:, j] for j in range(d)]


def _as_list(value, length, where):
    if not isinstance(value, list) or len(value) != length:
        raise ProblemFileError(f"{where}: expected a list of {length} entries")
    return value


def load_problem(source):
    """Load a problem file; returns ``(RbsdeProblem, RiskProblem or None, raw dict)``."""
    if isinstance(source, dict):
        raw = source
    else:
        try:
            raw = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ProblemFileError(f"cannot read problem file {source}: {exc}") from exc
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise ProblemFileError(f"unsupported schema_version {raw.get('schema_version')!r}")
    try:
        T = float(raw["horizon"])
        n = int(raw["modes"])
        d = int(raw.get("brownian_dim", 1))
        cost = CostMatrix(raw["cost"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProblemFileError(f"missing or malformed field: {exc}") from exc
    t = sympy.Symbol("t")
    xs, ys, zs = _symbols("x", d), _symbols("y", n), _symbols("z", d)
    dyn_raw = raw.get("dynamics", {"type": "deterministic"})
    deterministic = dyn_raw.get("type", "deterministic") == "deterministic"
    state = [] if deterministic else xs

    if deterministic:
        dynamics = Deterministic()
        sigma = None
    else:
        srows = _as_list(dyn_raw.get("sigma"), d, "dynamics.sigma")
        sig_exprs = [_parse(e, [t] + xs, "dynamics.sigma") for row in srows for e in _as_list(row, d, "sigma row")]
        sig_fn = _compile(sig_exprs, [t] + xs)

        def sigma(tt, path):
            vals = sig_fn(tt, *_state_columns(path, d))
            return vals.reshape(vals.shape[:-1] + (d, d))

        drift = None
        if "drift" in dyn_raw:
            dr_fn = _compile([_parse(e, [t] + xs, "dynamics.drift") for e in _as_list(dyn_raw["drift"], d, "drift")],
                             [t] + xs)

            def drift(tt, path):
                return dr_fn(tt, *_state_columns(path, d))

        dynamics = Markovian(np.asarray(dyn_raw.get("x0", [0.0] * d), dtype=float), sigma, drift)

    risk = None
    if "risk" in raw:
        risk = _load_risk(raw["risk"], T, n, d, cost, t, xs, sigma, dynamics, deterministic)
        problem = risk.to_problem()
    else:
        problem = _load_rbsde(raw, T, n, d, cost, t, xs, ys, zs, state, dynamics, deterministic)
    return problem, risk, raw


def _load_rbsde(raw, T, n, d, cost, t, xs, ys, zs, state, dynamics, deterministic):
    gen_raw = raw.get("generator", {})
    coupling = gen_raw.get("coupling", "diagonal")
    h_exprs = [_parse(e, [t] + state + ys, "generator.h") for e in _as_list(gen_raw.get("h"), n, "generator.h")]
    if coupling == "diagonal":
        for i, e in enumerate(h_exprs):
            other = e.free_symbols & (set(ys) - {ys[i]})
            if other:
                raise ProblemFileError(f"generator.h[{i}] reads other modes' values under diagonal coupling")
    h_fn = _compile(h_exprs, [t] + state + ys)

    def h(tt, y, path=None):
        y = np.asarray(y, dtype=float)
        cols = _state_columns(path, len(state)) if state else []
        if cols and y.ndim > 2:
            cols = [c.reshape(c.shape + (1,) * (y.ndim - 2)) for c in cols]
        out = h_fn(tt, *cols, *[y[..., i] for i in range(n)])
        return np.broadcast_to(out, y.shape)

    f_raw = gen_raw.get("f", "0")
    if isinstance(f_raw, dict) and "quadratic" in f_raw:
        c = float(f_raw["quadratic"])
        f_raw = f"{c / 2} * (" + " + ".join(f"z{j + 1}**2" for j in range(d)) + ")"
    f_fn = _compile([_parse(f_raw, [t] + zs, "generator.f")], [t] + zs)

    def f(tt, z):
        z = np.asarray(z, dtype=float)
        return np.broadcast_to(f_fn(tt, *[z[..., j] for j in range(d)])[..., 0], z.shape[:-1])

    linear_z = None
    if "linear_z" in gen_raw:
        rows = _as_list(gen_raw["linear_z"], n, "generator.linear_z")
        lz_fn = _compile([_parse(e, [t] + state, "generator.linear_z") for row in rows
                          for e in _as_list(row, d, "linear_z row")], [t] + state)

        def linear_z(tt, path=None):
            vals = lz_fn(tt, *(_state_columns(path, len(state)) if state else []))
            return vals.reshape(vals.shape[:-1] + (n, d))

    try:
        gen = GeneratorSpec(n=n, gamma=float(gen_raw.get("gamma", 1.0)), h=h, f=f, linear_z=linear_z,
                            coupling=coupling)
    except ValueError as exc:
        raise ProblemFileError(f"generator: {exc}") from exc
    term_raw = raw.get("terminal", {})
    xi_exprs = [_parse(e, state, "terminal.xi") for e in _as_list(term_raw.get("xi"), n, "terminal.xi")]
    xi_fn = _compile(xi_exprs, state)

    def xi(path=None):
        if path is None:
            return xi_fn(*([0.0] * len(state)))
        return np.broadcast_to(xi_fn(*_state_columns(path, len(state))), (np.shape(path)[0], n)).copy()

    bound = float(term_raw.get("bound", np.inf))
    return RbsdeProblem(T, n, d, cost, gen, TerminalCondition(xi, bound), dynamics,
                        project_terminal=bool(raw.get("project_terminal", False)))


def _load_risk(rr, T, n, d, cost, t, xs, sigma, dynamics, deterministic):
    state = [] if deterministic else xs
    l_fn = _compile([_parse(e, [t] + state, "risk.l") for e in _as_list(rr.get("l"), n, "risk.l")], [t] + state)
    xi_fn = _compile([_parse(e, state, "risk.xi") for e in _as_list(rr.get("xi"), n, "risk.xi")], state)
    if "b" in rr:
        b_rows = _as_list(rr["b"], n, "risk.b")
        b_fn = _compile([_parse(e, [t] + state, "risk.b") for row in b_rows for e in _as_list(row, d, "b row")],
                        [t] + state)
    else:
        b_fn = _compile([sympy.Integer(0)] * (n * d), [t] + state)

    def batch(vals, path):
        # constant coefficients come back unbatched
        if path is None or not state:
            return vals
        return np.broadcast_to(vals, (np.shape(path)[0],) + vals.shape[-1:])

    def l(tt, path=None):
        return batch(l_fn(tt, *(_state_columns(path, d) if state else [])), path)

    def b(tt, path=None):
        vals = batch(b_fn(tt, *(_state_columns(path, d) if state else [])), path)
        return vals.reshape(vals.shape[:-1] + (n, d))

    def xi(path=None):
        if path is None:
            return xi_fn(*([0.0] * len(state)))
        return np.broadcast_to(xi_fn(*_state_columns(path, len(state))), (np.shape(path)[0], n)).copy()

    if deterministic and "b" in rr:
        raise ProblemFileError("risk.b must be absent in the deterministic case")
    x0 = dynamics.x0 if not deterministic else np.zeros(d)
    try:
        return RiskProblem(sigma=sigma, b=b, l=l, x0=x0, cost=cost, xi=xi, horizon=T, n=n, d=d,
                           b_bound=rr.get("b_bound", 0.0 if deterministic else None), l_bound=rr.get("l_bound"),
                           xi_bound=rr.get("xi_bound"), lipschitz=rr.get("lipschitz"),
                           deterministic=deterministic)
    except StructuralError as exc:
        raise ProblemFileError(str(exc)) from exc
