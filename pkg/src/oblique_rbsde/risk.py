"""Risk-sensitive optimal switching of a functional SDE.

The state solves ``dX = sigma(t, X) dW`` under the reference measure.  Under a
strategy ``a`` it picks up the drift ``sigma b_{a(t)}``, realised either by a
Girsanov weight or by simulating the drifted dynamics.  The cost of a
strategy is

    J(a) = E^a[exp(int l_{a(s)}(s, X) ds + A^a(T) + xi_{a(T)}(X))]

and the value ``log J`` is the solution of the reflected system with the
generator ``l_i + <z, b_i> + |z|^2 / 2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .mc_engine import PathBundle, StatePaths, simulate_brownian, simulate_functional_sde
from .model import (CostMatrix, GeneratorSpec, Markovian, ProblemValidationError, RbsdeProblem, TerminalCondition,
                    TimeGrid, ValidationReport, Violation, quadratic_f)
from .penalization import Numerics, simulate_forward, solve_rbsde
from .switching import (ENUMERATION_CAP, StrategyPaths, SwitchingStrategy, enumerate_strategies,
                        extract_optimal_strategy)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RiskProblem:
    """Data of the switching problem.

    ``sigma(t, path) -> (P, d, d)``, ``b(t, path) -> (P, n, d)``,
    ``l(t, path) -> (P, n)`` and ``xi(path) -> (P, n)``; ``path`` is the
    state history ``(P, k + 1, d)``.  With ``deterministic=True`` the data
    must not depend on the path (``b`` is ignored and must vanish) and are
    called with ``path=None``, returning ``(n,)``.
    """

    sigma: Callable
    b: Callable
    l: Callable
    x0: np.ndarray
    cost: CostMatrix
    xi: Callable
    horizon: float
    n: int
    d: int = 1
    b_bound: Optional[float] = None
    l_bound: Optional[float] = None
    xi_bound: Optional[float] = None
    lipschitz: Optional[float] = None
    deterministic: bool = False
    path_dependent: bool = False

    def __post_init__(self):
        missing = [name for name in ("b_bound", "l_bound", "xi_bound") if getattr(self, name) is None]
        if missing:
            raise ProblemValidationError("risk problem needs declared bounds: " + ", ".join(missing))
        if not isinstance(self.cost, CostMatrix):
            object.__setattr__(self, "cost", CostMatrix(self.cost))
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))

    def to_problem(self) -> RbsdeProblem:
        from .model import Deterministic

        dyn = Deterministic() if self.deterministic else Markovian(self.x0, self.sigma)
        return RbsdeProblem(self.horizon, self.n, self.d, self.cost, build_risk_generator(self),
                            TerminalCondition(self.xi, self.xi_bound), dyn)


def build_risk_generator(rp: RiskProblem) -> GeneratorSpec:
    """``phi_i(t, x, z) = l_i(t, x) + <z, b_i(t, x)> + |z|^2 / 2``.

    ``gamma = max(l_bound, 1/2 + b_bound)`` covers the growth and local
    Lipschitz inequalities of the split generator.
    """
    if rp.b_bound is None or rp.l_bound is None:
        raise ProblemValidationError("risk generator needs bounds on b and l")
    gamma = max(float(rp.l_bound), 0.5 + float(rp.b_bound))
    l = rp.l

    def h(t, y, path=None):
        return np.broadcast_to(np.asarray(l(t, path), dtype=float), np.shape(y))

    linear_z = None if rp.deterministic else rp.b
    return GeneratorSpec(n=rp.n, gamma=gamma, h=h, f=quadratic_f(1.0), linear_z=linear_z)


def check_risk_problem(rp: RiskProblem, samples: int = 200, length: int = 8, radius: float = 3.0,
                       seed: int = 0) -> ValidationReport:
    """Spot-check the declared bounds and path-Lipschitz constant on random path pairs."""
    rng = np.random.default_rng(seed)
    violations = []
    if rp.deterministic:
        t = rng.uniform(0, rp.horizon, samples)
        lv = np.array([np.asarray(rp.l(s, None)) for s in t])
        if np.max(np.abs(lv)) > rp.l_bound + 1e-12:
            violations.append(Violation("H3", ("l",), f"|l| reaches {np.max(np.abs(lv)):.4g}"))
        return ValidationReport("H", tuple(violations), {"H2": True, "H3": not violations})
    x = rng.uniform(-radius, radius, (samples, length, rp.d)) + rp.x0
    xb = x + rng.normal(0.0, 0.1, x.shape)
    dist = np.max(np.linalg.norm(x - xb, axis=-1), axis=1)
    t = float(rng.uniform(0, rp.horizon))
    b, bb = np.asarray(rp.b(t, x)), np.asarray(rp.b(t, xb))
    lv, lb = np.asarray(rp.l(t, x)), np.asarray(rp.l(t, xb))
    sg, sgb = np.asarray(rp.sigma(t, x)), np.asarray(rp.sigma(t, xb))
    checks = {"H2": True, "H3": True}
    if np.max(np.linalg.norm(b, axis=-1)) > rp.b_bound + 1e-12:
        violations.append(Violation("H3", ("b",), "declared bound on b exceeded"))
    if np.max(np.abs(lv)) > rp.l_bound + 1e-12:
        violations.append(Violation("H3", ("l",), "declared bound on l exceeded"))
    if rp.lipschitz is not None:
        lip = rp.lipschitz
        for name, u, v in (("b", b, bb), ("l", lv, lb), ("sigma", sg, sgb)):
            inc = np.abs(u - v)
            inc = np.broadcast_to(inc, (samples,) + inc.shape[1:]).reshape(samples, -1).max(axis=1)
            if np.any(inc > lip * dist + 1e-12):
                violations.append(Violation("H2", (name,), f"increment exceeds {lip:g} * path distance"))
    for v in violations:
        checks[v.assumption] = False
    return ValidationReport("H", tuple(violations), checks)


# ---------------------------------------------------------------------------
# cost functional


@dataclass
class CostEstimate:
    value: float
    se: float
    log_value: float
    log_se: float
    samples: Optional[np.ndarray] = field(default=None, repr=False)


class _LogIncrements:
    """Per-path running sums of ``l_i dt`` plus the Girsanov log-weight increment.

    ``cum[p, k, i]`` sums steps ``0 .. k - 1`` in mode ``i``, so a segment
    ``[k0, k1)`` in mode ``i`` contributes ``cum[:, k1, i] - cum[:, k0, i]``.
    """

    def __init__(self, rp: RiskProblem, states: Optional[StatePaths], grid: TimeGrid, weights: bool = True):
        N, dt, t = grid.steps, grid.dt, grid.nodes
        if states is None:
            steps = np.stack([np.asarray(rp.l(t[k], None), dtype=float) * dt for k in range(N)])[None]
            self.xi = np.asarray(rp.xi(None), dtype=float)[None]
        else:
            P = states.x.shape[0]
            steps = np.empty((P, N, rp.n))
            dw = states.paths.dw
            for k in range(N):
                hist = states.history(k)
                steps[:, k] = np.broadcast_to(rp.l(t[k], hist), (P, rp.n)) * dt
                if weights:
                    bk = np.broadcast_to(rp.b(t[k], hist), (P, rp.n, rp.d))
                    steps[:, k] += np.einsum("pnd,pd->pn", bk, dw[:, k]) - 0.5 * np.sum(bk * bk, axis=-1) * dt
            self.xi = np.asarray(rp.xi(states.x), dtype=float)
        self.cum = np.zeros((steps.shape[0], N + 1, rp.n))
        np.cumsum(steps, axis=1, out=self.cum[:, 1:])
        self.N = N
        self.cost = rp.cost.k

    def log_values(self, a) -> np.ndarray:
        """Per-path log of the integrand times its weight."""
        if isinstance(a, StrategyPaths):
            rows = np.arange(self.cum.shape[0])
            inc = np.diff(self.cum, axis=1)
            total = np.take_along_axis(inc, a.modes[:, :, None], axis=2)[:, :, 0].sum(axis=1)
            return total + a.costs[:, -1] + self.xi[rows, a.modes[:, -1]]
        a.check_admissible(self.N, self.cost.shape[0])
        bounds = [a.start_node] + [node for node, _ in a.switches] + [self.N]
        modes = [a.start_mode] + [mode for _, mode in a.switches]
        total = np.zeros(self.cum.shape[0])
        for k0, k1, mode in zip(bounds[:-1], bounds[1:], modes):
            total += self.cum[:, k1, mode] - self.cum[:, k0, mode]
        return total + a.cost_on_nodes(self.cost, self.N)[-1] + self.xi[:, a.terminal_mode]


def _summarise(logv: np.ndarray) -> CostEstimate:
    shift = float(np.max(logv))
    w = np.exp(logv - shift)
    mean = float(w.mean())
    P = w.size
    se_rel = float(w.std(ddof=1) / np.sqrt(P) / mean) if P > 1 else 0.0
    log_value = shift + np.log(mean)
    return CostEstimate(float(np.exp(log_value)), float(np.exp(log_value)) * se_rel, float(log_value), se_rel,
                        samples=w / mean)


def _drifted_states(rp: RiskProblem, a: SwitchingStrategy, paths: PathBundle) -> StatePaths:
    grid = paths.grid
    modes = a.modes_on_steps(grid.steps)
    rows = np.arange(paths.num_paths)

    def drift(t, hist):
        k = hist.shape[1] - 1
        return np.broadcast_to(rp.b(t, hist), (len(rows), rp.n, rp.d))[rows, modes[k]]

    return simulate_functional_sde(rp.sigma, rp.x0, paths, drift)


def estimate_cost(rp: RiskProblem, a, paths: Optional[PathBundle] = None, route: str = "girsanov",
                  grid: Optional[TimeGrid] = None, states: Optional[StatePaths] = None) -> CostEstimate:
    """Monte Carlo estimate of ``J(a)`` with its standard error.

    ``route="girsanov"`` simulates the reference dynamics and weights each
    path by the stochastic exponential of ``b_{a} . W``; ``route="drift"``
    simulates the drifted dynamics directly with unit weights.  Running
    costs use left-endpoint sums.  In the deterministic case ``paths`` may
    be omitted in favour of ``grid``.
    """
    if rp.deterministic and paths is None and states is None:
        if grid is None:
            raise ValueError("pass a grid or a path bundle")
        logv = _LogIncrements(rp, None, grid).log_values(a)
        return _summarise(logv)
    if route == "girsanov":
        if states is None:
            states = simulate_functional_sde(rp.sigma, rp.x0, paths)
        inc = _LogIncrements(rp, states, states.grid, weights=not rp.deterministic)
    elif route == "drift":
        if isinstance(a, StrategyPaths):
            raise ValueError("the drift route needs a deterministic strategy")
        if paths is None:
            paths = states.paths
        drifted = _drifted_states(rp, a, paths)
        inc = _LogIncrements(rp, drifted, paths.grid, weights=False)
    else:
        raise ValueError("route must be 'girsanov' or 'drift'")
    logv = inc.log_values(a)
    if not np.all(np.isfinite(logv)):
        raise FloatingPointError("non-finite cost sample")
    return _summarise(logv)


# ---------------------------------------------------------------------------
# optimality check


@dataclass
class RiskReport:
    Y0: float
    logJ_star: float
    se: float
    gap: float
    lower_bound_violations: int
    strategies_tested: int
    mode: int = 0
    table: list = field(default_factory=list)  # (digest, logJ, se)
    tolerance: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"Y0": self.Y0, "logJ_star": self.logJ_star, "se": self.se, "gap": self.gap,
                "lower_bound_violations": self.lower_bound_violations,
                "strategies_tested": self.strategies_tested}


def random_strategies(steps: int, n: int, start_mode: int, count: int, rng: np.random.Generator,
                      max_switches: int = 3):
    out = []
    for _ in range(count):
        s = int(rng.integers(0, max_switches + 1))
        nodes = np.sort(rng.choice(steps, size=min(s, steps), replace=False))
        prev, sw = start_mode, []
        for node in nodes:
            mode = int(rng.choice([m for m in range(n) if m != prev]))
            sw.append((int(node), mode))
            prev = mode
        out.append(SwitchingStrategy(start_mode, tuple(sw)))
    return out


def _coarse_enumeration(steps, n, start_mode, max_switches, enum_nodes, cap):
    """All strategies with switches on ``enum_nodes`` evenly spaced candidate nodes."""
    nodes = np.unique(np.floor(np.linspace(0, steps, max(1, enum_nodes), endpoint=False)).astype(int))
    out = []
    for a in enumerate_strategies(len(nodes), n, start_mode, max_switches, cap):
        out.append(SwitchingStrategy(start_mode, tuple((int(nodes[j]), mode) for j, mode in a.switches)))
    return out


def verify_risk_optimality(rp: RiskProblem, numerics: Numerics, start_mode: int = 0, max_switches: int = 2,
                           n_random: int = 100, enum_nodes: int = 20, strategy_seed: Optional[int] = None,
                           m_max: float = 256.0, slack_tol: float = 1e-2, n_se: float = 3.0,
                           det_tol: float = 1e-3, cap: int = ENUMERATION_CAP) -> RiskReport:
    """Solve the reflected system for the risk generator and compare with ``log J``.

    Reports ``log J(a*) - Y_i(0)`` for the extracted strategy and counts
    strategies with ``log J(a) < Y_i(0) - tol``, where ``tol`` is ``n_se``
    standard errors of the pathwise difference in the Monte Carlo case and
    ``det_tol`` in the deterministic one.
    """
    problem = rp.to_problem()
    if not problem.unique_regime:
        raise ProblemValidationError("risk verification needs a cost matrix satisfying (A4)")
    deterministic = problem.deterministic and not numerics.force_mc
    states = None if deterministic else simulate_forward(problem, numerics)
    if rp.path_dependent and states is not None:
        logger.info("path-dependent coefficients regressed on a window of %d nodes", numerics.window)
    sol = solve_rbsde(problem, numerics, m_max=m_max, slack_tol=slack_tol, states=states)
    y0 = float(sol.value0[start_mode])
    grid = sol.grid
    inc = _LogIncrements(rp, states, grid, weights=not deterministic)
    a_star = extract_optimal_strategy(sol, problem.cost, start_mode, gamma=problem.gen.gamma)
    rng = np.random.default_rng(strategy_seed if strategy_seed is not None else (numerics.seed or 0))
    family = _coarse_enumeration(grid.steps, rp.n, start_mode, max_switches, enum_nodes, cap)
    family += random_strategies(grid.steps, rp.n, start_mode, n_random, rng)
    y_path = None if deterministic else sol.y0_paths[:, start_mode]

    def stats(logv):
        est = _summarise(logv)
        if deterministic:
            return est, 0.0
        d = est.samples - y_path
        return est, float(d.std(ddof=1) / np.sqrt(d.size))

    star, se_star = stats(inc.log_values(a_star))
    table, violations = [], 0
    for a in family:
        est, se = stats(inc.log_values(a))
        table.append((a.digest(), est.log_value, se))
        tol = det_tol if deterministic else n_se * se
        if est.log_value < y0 - tol:
            violations += 1
    table.sort(key=lambda r: r[0])
    diag = {"m": sol.m, "slack_sup": sol.slack_sup, "clip_activation_rate": sol.diagnostics["clip_activation_rate"],
            "mode_dependent_linear_z": not deterministic}
    if isinstance(a_star, StrategyPaths):
        diag["max_switches_star"] = int(a_star.counts.max())
    else:
        diag["strategy_star"] = a_star.digest()
    return RiskReport(Y0=y0, logJ_star=star.log_value, se=se_star, gap=star.log_value - y0,
                      lower_bound_violations=violations, strategies_tested=len(family), mode=start_mode,
                      table=table, tolerance=det_tol if deterministic else n_se, diagnostics=diag)
