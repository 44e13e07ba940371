"""Switching strategies, switched BSDEs and the optimal-switching representation
of the reflected solution."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import detgrid
from .model import CostMatrix, RbsdeProblem, TimeGrid
from .penalization import DesignCache, DiscreteSolution, Numerics, PicardError, make_design, simulate_forward

ENUMERATION_CAP = 100_000
SWITCH_CAP = 50


class AdmissibilityError(ValueError):
    pass


class EnumerationCapError(ValueError):
    pass


class ChatteringError(RuntimeError):
    def __init__(self, message, count):
        super().__init__(message)
        self.count = count


@dataclass(frozen=True)
class SwitchingStrategy:
    """Grid-snapped strategy: start in ``start_mode`` at ``start_node`` and
    switch to ``mode`` at each ``(node, mode)`` in ``switches``.

    A switch at node ``k`` makes the new mode active on the step
    ``(t_k, t_{k+1}]``.  The terminal node carries the end marker, so
    switches may happen at nodes ``start_node .. steps - 1``.
    """

    start_mode: int
    switches: tuple = ()
    start_node: int = 0

    def __post_init__(self):
        object.__setattr__(self, "switches", tuple((int(a), int(b)) for a, b in self.switches))

    @property
    def N(self) -> int:
        """Switch count including the terminal marker."""
        return len(self.switches) + 1

    @property
    def terminal_mode(self) -> int:
        return self.switches[-1][1] if self.switches else self.start_mode

    def check_admissible(self, steps: int, n: Optional[int] = None):
        prev_node, prev_mode = self.start_node, self.start_mode
        if n is not None and not 0 <= self.start_mode < n:
            raise AdmissibilityError(f"start mode {self.start_mode} out of range")
        for node, mode in self.switches:
            if node < prev_node:
                raise AdmissibilityError("switch nodes must be non-decreasing")
            if node >= steps:
                raise AdmissibilityError(f"switch at node {node}: the last switch must precede T (node {steps})")
            if mode == prev_mode:
                raise AdmissibilityError(f"switch at node {node} keeps mode {mode}")
            if n is not None and not 0 <= mode < n:
                raise AdmissibilityError(f"mode {mode} out of range")
            prev_node, prev_mode = node, mode

    def modes_on_steps(self, steps: int) -> np.ndarray:
        modes = np.full(steps, self.start_mode, dtype=int)
        for node, mode in self.switches:
            modes[node:] = mode
        return modes

    def cost_on_nodes(self, cost, steps: int) -> np.ndarray:
        kk = cost.k if isinstance(cost, CostMatrix) else np.asarray(cost)
        A = np.zeros(steps + 1)
        prev = self.start_mode
        for node, mode in self.switches:
            A[node:] += kk[prev, mode]
            prev = mode
        return A

    def refine(self, factor: int) -> "SwitchingStrategy":
        f = int(factor)
        return SwitchingStrategy(self.start_mode, tuple((node * f, mode) for node, mode in self.switches),
                                 self.start_node * f)

    def digest(self) -> str:
        parts = [f"{self.start_mode}@t{self.start_node}"]
        parts += [f"{mode}@t{node}" for node, mode in self.switches]
        return " -> ".join(parts + ["T"])


@dataclass(frozen=True)
class StrategyPaths:
    """One grid-snapped strategy per simulated path."""

    modes: np.ndarray  # (P, N) active mode on each step
    costs: np.ndarray  # (P, N + 1) cumulative cost, right-continuous
    counts: np.ndarray  # (P,) number of switches
    switch_log: tuple = field(default=(), repr=False)  # per path tuple of (node, mode)
    start_mode: int = 0

    def path(self, p: int) -> SwitchingStrategy:
        return SwitchingStrategy(self.start_mode, self.switch_log[p])


class SwitchedValue(NamedTuple):
    value: float
    se: float


def cost_process(a: SwitchingStrategy, k, grid: TimeGrid) -> np.ndarray:
    """``A(t_k)``: cumulative switching cost, right-continuous in time."""
    a.check_admissible(grid.steps)
    return a.cost_on_nodes(k, grid.steps)


def enumerate_strategies(steps: int, n: int, start_mode: int, max_switches: int,
                         cap: int = ENUMERATION_CAP, start_node: int = 0):
    """Every strategy with at most ``max_switches`` switches at distinct nodes.

    Candidate nodes are ``start_node .. steps - 1``.
    """
    nodes = list(range(start_node, steps))
    total = sum(math.comb(len(nodes), s) * (n - 1) ** s for s in range(max_switches + 1))
    if total > cap:
        raise EnumerationCapError(
            f"{total} strategies exceed the cap of {cap}; use the dynamic-programming verification instead")
    out = [SwitchingStrategy(start_mode, (), start_node)]
    for s in range(1, max_switches + 1):
        for where in itertools.combinations(nodes, s):
            for seq in _mode_sequences(start_mode, n, s):
                out.append(SwitchingStrategy(start_mode, tuple(zip(where, seq)), start_node))
    return out


def _mode_sequences(start, n, length):
    if length == 0:
        yield ()
        return
    for m in range(n):
        if m != start:
            for rest in _mode_sequences(m, n, length - 1):
                yield (m,) + rest


def _arrays(strategies, cost, steps):
    modes = np.stack([a.modes_on_steps(steps) for a in strategies])
    costs = np.stack([a.cost_on_nodes(cost, steps) for a in strategies])
    return modes, costs


# ---------------------------------------------------------------------------
# switched BSDE


def _switched_mc(problem: RbsdeProblem, modes, costs, states, designs: DesignCache, numerics: Numerics,
                 per_path: bool):
    """Backward regression for the shifted switched BSDE.

    Deterministic strategies: ``modes`` ``(S, N)``, ``costs`` ``(S, N + 1)``,
    solved together as ``S`` targets on one design per node.  Per-path
    strategies: ``modes`` ``(P, N)``, regressions split by active mode.
    Returns the node-0 values and the pathwise accumulation
    ``xi + A(T) + sum_k dt * driver_k``, each ``(P, S)`` (``S = 1`` per path);
    the accumulation has the same mean as the node-0 values.
    """
    gen = problem.gen
    grid = states.grid
    dt, t = grid.dt, grid.nodes
    P, N1, d = states.x.shape
    N, n = N1 - 1, problem.n
    z_clip = numerics.z_clip if numerics.z_clip is not None else _default_clip(problem)
    tol = numerics.picard_tol if numerics.picard_tol is not None else 1e-8
    xi = problem.terminal_values(states.x)  # (P, n)
    if per_path:
        S = 1
        modes_pk = modes  # (P, N)
        cost_pk = costs  # (P, N + 1)
        ut = xi[np.arange(P), modes_pk[:, -1]][:, None] + cost_pk[:, -1:]
    else:
        S = modes.shape[0]
        ut = xi[:, modes[:, -1]] + costs[None, :, -1]  # (P, S)
    acc = ut.copy()
    for k in range(N - 1, -1, -1):
        hist = states.history(k)
        dw = states.paths.dw[:, k]
        if per_path:
            a_k = modes_pk[:, k][:, None]  # (P, 1)
            A_k = cost_pk[:, k][:, None]
        else:
            a_k = np.broadcast_to(modes[:, k], (P, S))
            A_k = np.broadcast_to(costs[:, k], (P, S))
        target = ut - A_k
        if per_path:
            cond = np.empty_like(target)
            v = np.empty((P, 1, d))
            for mode in np.unique(a_k):
                rows = np.nonzero(a_k[:, 0] == mode)[0]
                des = _group_design(designs, k, rows, numerics)
                cond[rows] = des.project(target[rows])
                vt = (target[rows] - cond[rows])[:, :, None] * dw[rows, None, :] / dt
                v[rows] = des.project(vt.reshape(len(rows), d)).reshape(len(rows), 1, d)
        else:
            des = designs(k)
            cond = des.project(target)
            vt = (target - cond)[:, :, None] * dw[:, None, :] / dt
            v = des.project(vt.reshape(P, S * d)).reshape(P, S, d)
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        vc = v * np.where(norm > z_clip, z_clip / np.maximum(norm, 1e-300), 1.0)
        fz = gen.f(t[k], vc)
        if gen.linear_z is not None:
            b = np.asarray(gen.linear_z(t[k], hist))
            b = np.broadcast_to(b, (P,) + b.shape[-2:])
            bsel = np.take_along_axis(b, a_k[:, :, None], axis=1)  # (P, S, d)
            fz = fz + np.sum(v * bsel, axis=-1)
        u = cond.copy()
        for it in range(1, numerics.picard_max + 1):
            hvals = _own_mode_h(gen, t[k], u, a_k, hist, n)
            new = cond + dt * (hvals + fz)
            diff = float(np.max(np.abs(new - u)))
            u = new
            if diff <= tol:
                break
        else:
            raise PicardError(f"Picard iteration did not converge at node {k}", k, diff)
        acc += u - cond
        ut = u + A_k
    return ut, acc


def _own_mode_h(gen, t, u, a, hist, n):
    """``h_{a}(t, u)`` for a scalar value per column, own-mode argument only."""
    P, S = u.shape
    y = np.repeat(u[:, :, None], n, axis=2)  # (P, S, n)
    if hist is None:
        h = gen.h(t, y, None)
    else:
        h = np.stack([gen.h(t, y[:, s], hist) for s in range(S)], axis=1)
    return np.take_along_axis(np.asarray(h), a[:, :, None], axis=2)[:, :, 0]


def _group_design(designs: DesignCache, k, rows, numerics):
    return make_design(designs.features(k)[rows], numerics, rows=len(rows))


def _default_clip(problem):
    return 10.0 * problem.gen.gamma * (1.0 + problem.terminal.bound)


def _det_check(problem):
    if problem.gen.coupling != "diagonal":
        raise ValueError("switched BSDEs need a diagonal generator")


def switched_values(problem: RbsdeProblem, strategies, numerics: Numerics, states=None, designs=None,
                    grid: Optional[TimeGrid] = None, refine: int = 1):
    """Values and standard errors of many deterministic strategies at once.

    Returns ``(values, se, pathwise)``, where ``pathwise`` holds the
    accumulations behind each value (``None`` in the deterministic regime).
    """
    _det_check(problem)
    if problem.deterministic and not numerics.force_mc:
        grid = grid or numerics.grid(problem)
        for a in strategies:
            a.check_admissible(grid.steps, problem.n)
        fine = [a.refine(refine) for a in strategies] if refine > 1 else list(strategies)
        g = grid.refine(refine) if refine > 1 else grid
        modes, costs = _arrays(fine, problem.cost, g.steps)
        vals = detgrid.switched_ode_batch(problem, modes, costs, g)
        return vals, np.zeros(len(strategies)), None
    if states is None:
        states = simulate_forward(problem, numerics)
    designs = designs or DesignCache(states, numerics)
    steps = states.grid.steps
    for a in strategies:
        a.check_admissible(steps, problem.n)
    modes, costs = _arrays(strategies, problem.cost, steps)
    ut, acc = _switched_mc(problem, modes, costs, states, designs, numerics, per_path=False)
    P = ut.shape[0]
    return ut.mean(axis=0), acc.std(axis=0, ddof=1) / np.sqrt(P), acc


def solve_switched_bsde(problem: RbsdeProblem, a, numerics: Numerics, states=None, designs=None,
                        grid: Optional[TimeGrid] = None, refine: int = 1) -> SwitchedValue:
    """``U^a(t0)`` for a strategy, via the shifted variable ``U + A``.

    ``a`` is a :class:`SwitchingStrategy` (deterministic) or a
    :class:`StrategyPaths` (one strategy per simulated path).
    """
    _det_check(problem)
    if isinstance(a, StrategyPaths):
        if problem.deterministic and not numerics.force_mc:
            grid = grid or numerics.grid(problem)
            vals = detgrid.switched_ode_batch(problem, a.modes[:1], a.costs[:1], grid)
            return SwitchedValue(float(vals[0]), 0.0)
        if states is None:
            states = simulate_forward(problem, numerics)
        designs = designs or DesignCache(states, numerics)
        ut, acc = _switched_mc(problem, a.modes, a.costs, states, designs, numerics, per_path=True)
        P = ut.shape[0]
        return SwitchedValue(float(ut.mean()), float(acc.std(ddof=1) / np.sqrt(P)))
    vals, se, _ = switched_values(problem, [a], numerics, states, designs, grid, refine)
    return SwitchedValue(float(vals[0]), float(se[0]))


# ---------------------------------------------------------------------------
# optimal strategy


def extract_optimal_strategy(solution: DiscreteSolution, k, start_mode: int,
                             boundary_tol: Optional[float] = None, values: str = "reflected",
                             max_switches: int = SWITCH_CAP, gamma: float = 1.0):
    """Forward scan for the first hitting times of the switching boundaries.

    At each node the current mode switches to ``argmin_{l != cur}(Y_l + k_{cur,l})``
    (lowest index on ties) when its value is within ``boundary_tol`` of that
    obstacle; further switches at the same node are allowed while the new mode
    also sits on a boundary, never revisiting a mode within the node.

    ``values="reflected"`` scans the domain-capped values, which sit exactly on
    the boundary where reflection acts, with a floating-point tolerance by
    default.  ``values="raw"`` scans ``Y^m`` with the default tolerance
    ``2 * slack_sup + 2 * gamma * dt``.

    Returns a :class:`SwitchingStrategy` in the deterministic regime and a
    :class:`StrategyPaths` otherwise.
    """
    kk = np.asarray(k.k if isinstance(k, CostMatrix) else k)
    y = solution.y_reflected if values == "reflected" else solution.y
    N1, P, n = y.shape
    N = N1 - 1
    if boundary_tol is None:
        if values == "reflected":
            boundary_tol = 1e-9 * (1.0 + float(np.max(np.abs(y))))
        else:
            boundary_tol = 2.0 * solution.slack_sup + 2.0 * gamma * solution.grid.dt
    off = np.where(np.eye(n, dtype=bool), np.inf, kk)
    cur = np.full(P, int(start_mode))
    counts = np.zeros(P, dtype=int)
    modes = np.empty((P, N), dtype=int)
    costs = np.zeros((P, N + 1))
    log = [[] for _ in range(P)]
    rows = np.arange(P)
    acc = np.zeros(P)
    for node in range(N):
        visited = np.zeros((P, n), dtype=bool)
        visited[rows, cur] = True
        for _ in range(n - 1):
            yk = y[node]
            obst = yk[:, None, :] + off[None, :, :]  # obst[p, i, l] = Y_l + k_il
            cand = obst[rows, cur]  # (P, n)
            cand = np.where(visited, np.inf, cand)
            best = np.argmin(cand, axis=1)
            best_val = cand[rows, best]
            hit = yk[rows, cur] >= best_val - boundary_tol
            if not hit.any():
                break
            acc[hit] += kk[cur[hit], best[hit]]
            for p in np.nonzero(hit)[0]:
                log[p].append((node, int(best[p])))
            cur = np.where(hit, best, cur)
            visited[rows[hit], best[hit]] = True
            counts += hit
        if counts.max() > max_switches:
            raise ChatteringError(
                f"extracted strategy needs more than {max_switches} switches; (A4) may fail or the "
                "boundary tolerance is too loose", int(counts.max()))
        modes[:, node] = cur
        costs[:, node] = acc
    costs[:, N] = acc
    if solution.deterministic:
        return SwitchingStrategy(int(start_mode), tuple(log[0]))
    return StrategyPaths(modes=modes, costs=costs, counts=counts, switch_log=tuple(tuple(l) for l in log),
                         start_mode=int(start_mode))


@dataclass
class ExtractionResult:
    strategy: object
    rbsde_value: float
    value: float
    se: float
    gap: float
    max_switches: int


def certify_optimal_strategy(problem: RbsdeProblem, solution: DiscreteSolution, start_mode: int,
                             numerics: Numerics, boundary_tol: Optional[float] = None,
                             values: str = "reflected", max_switches: int = SWITCH_CAP) -> ExtractionResult:
    """Extract the optimal strategy and recompute its switched-BSDE value."""
    a = extract_optimal_strategy(solution, problem.cost, start_mode, boundary_tol, values, max_switches,
                                 problem.gen.gamma)
    if solution.deterministic:
        val = solve_switched_bsde(problem, a, numerics, grid=solution.grid)
        count = len(a.switches)
    else:
        val = solve_switched_bsde(problem, a, numerics, states=solution.states)
        count = int(a.counts.max())
    y0 = float(solution.value0[start_mode])
    return ExtractionResult(a, y0, val.value, val.se, y0 - val.value, count)


# ---------------------------------------------------------------------------
# representation


@dataclass
class RepresentationReport:
    mode: int
    rbsde_value: float
    oracle_min: float
    minimizer: Optional[str]
    gap: float
    table: list = field(default_factory=list)  # (digest, U^a(0), se)
    lower_bound_violations: list = field(default_factory=list)
    tolerance: float = 0.0
    method: str = "dp"

    @property
    def lower_bound_ok(self) -> bool:
        return not self.lower_bound_violations

    def csv_rows(self):
        for digest, u, se in self.table:
            yield [digest, u, se, self.rbsde_value - u]


def verify_representation(problem: RbsdeProblem, solution: DiscreteSolution, mode: int,
                          numerics: Numerics, verification: str = "dp", max_switches: int = 2,
                          enum_steps: Optional[int] = None, tol: Optional[float] = None,
                          n_se: float = 3.0, cap: int = ENUMERATION_CAP) -> RepresentationReport:
    """Compare ``Y_mode(t0)`` with the minimum over strategies.

    ``verification="dp"`` uses the Bellman recursion on the solution grid
    (deterministic regime).  ``"enumerate"`` evaluates every strategy with at
    most ``max_switches`` switches and checks ``Y <= U^a + tol`` for each.
    In the deterministic regime the strategies live on a grid of
    ``enum_steps`` steps and are integrated on a refinement of it; in the
    Monte Carlo regime they live on the solution's own grid and paths, and
    ``tol`` is ``n_se`` standard errors of the pathwise difference.
    """
    y0 = float(solution.value0[mode])
    if verification == "dp":
        if not solution.deterministic:
            raise ValueError("dp verification needs the deterministic regime")
        v = detgrid.dp_switching_value(problem, solution.grid)
        dp_sol = DiscreteSolution(grid=solution.grid, m=np.inf, cost=problem.cost, y=v[:, None, :],
                                  z=np.zeros(v.shape + (1,)), k_cum=np.zeros_like(v[:, None, :]))
        try:
            best = extract_optimal_strategy(dp_sol, problem.cost, mode).digest()
        except ChatteringError:
            best = None
        oracle = float(v[0, mode])
        return RepresentationReport(mode, y0, oracle, best, y0 - oracle, method="dp",
                                    tolerance=0.0 if tol is None else tol)
    if verification != "enumerate":
        raise ValueError("verification must be 'dp' or 'enumerate'")
    if solution.deterministic:
        steps = enum_steps or 19
        grid = TimeGrid(solution.grid.t0, solution.grid.T, steps)
        strategies = enumerate_strategies(steps, problem.n, mode, max_switches, cap)
        refine = max(1, int(math.ceil(solution.grid.steps / steps)))
        vals, se, _ = switched_values(problem, strategies, numerics, grid=grid, refine=refine)
        tols = np.full(len(strategies), 1e-3 if tol is None else tol)
    else:
        steps = solution.grid.steps
        strategies = enumerate_strategies(steps, problem.n, mode, max_switches, cap)
        designs = DesignCache(solution.states, numerics)
        vals, se, acc = switched_values(problem, strategies, numerics, states=solution.states, designs=designs)
        ypath = solution.y0_paths[:, mode][:, None]
        diff_se = (ypath - acc).std(axis=0, ddof=1) / np.sqrt(acc.shape[0])
        tols = n_se * diff_se if tol is None else np.full(len(strategies), tol)
    table = sorted(((a.digest(), float(u), float(s)) for a, u, s in zip(strategies, vals, se)),
                   key=lambda r: r[0])
    violations = [(a.digest(), float(u), float(tl)) for a, u, tl in zip(strategies, vals, tols)
                  if y0 > u + tl]
    j = int(np.argmin(vals))
    return RepresentationReport(mode, y0, float(vals[j]), strategies[j].digest(), y0 - float(vals[j]),
                                table=table, lower_bound_violations=violations,
                                tolerance=float(np.max(tols)), method="enumerate")
