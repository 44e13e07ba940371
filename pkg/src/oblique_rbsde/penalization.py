"""Penalised BSDE scheme and the reflected solution obtained as ``m`` grows.

Mode ``i`` of the penalised system carries the extra driver term
``-m sum_l (Y_i - Y_l - k_il)^+``.  For a fixed ``m`` the deterministic
regime is delegated to :mod:`detgrid`; otherwise a backward regression scheme
runs on simulated paths.  :func:`solve_rbsde` doubles ``m`` until the domain
constraint is violated by less than a tolerance.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from . import detgrid
from .mc_engine import KernelDesign, PolynomialBasis, RegressionDesign, StatePaths, simulate_brownian, simulate_functional_sde
from .model import CostMatrix, Markovian, RbsdeProblem, TimeGrid, constraint_residual, oblique_projection

logger = logging.getLogger(__name__)


class PicardError(RuntimeError):
    def __init__(self, message, node, residual):
        super().__init__(message)
        self.node = node
        self.residual = residual


class ConvergenceError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class Numerics:
    """Discretisation and Monte Carlo settings.

    ``seed`` is mandatory whenever paths are simulated.  ``basis_degree``
    ``None`` selects the dimension-dependent default basis.
    """

    num_paths: int = 10_000
    steps: int = 50
    seed: Optional[int] = None
    basis_degree: Optional[int] = None
    ridge_lambda: float = 1e-8
    z_clip: Optional[float] = None
    picard_max: int = 50
    picard_tol: Optional[float] = None
    m_start: float = 1.0
    stiffness_cap: float = detgrid.STIFFNESS_CAP
    mc_stiffness_cap: float = 5.0
    window: int = 1
    clip_warn_rate: float = 0.01
    workers: int = 1
    force_mc: bool = False
    feature_clip: Optional[float] = 2.5
    regression: str = "polynomial"
    kernel_bins: int = 24

    def __post_init__(self):
        if self.regression not in ("polynomial", "kernel"):
            raise ValueError(f"unknown regression {self.regression!r}")

    def grid(self, problem: RbsdeProblem) -> TimeGrid:
        return problem.grid(self.steps)


@dataclass
class DiscreteSolution:
    """Grid values of a penalised solve.

    ``y`` holds the penalised values ``Y^m`` with shape ``(N + 1, P, n)``
    (``P = 1`` in the deterministic regime), ``z`` is ``(N + 1, P, n, d)``
    and ``k_cum`` the cumulative increasing process ``(N + 1, P, n)``.
    ``y_reflected`` caps ``Y^m`` onto the closed domain along ``-e_i``; since
    ``Y^m`` decreases to the reflected solution which already lies in the
    domain, the capped values are a tighter estimate from the same side.
    """

    grid: TimeGrid
    m: float
    cost: CostMatrix
    y: np.ndarray
    z: np.ndarray
    k_cum: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    states: Optional[StatePaths] = None
    y0_se: Optional[np.ndarray] = None
    y0_paths: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.y.shape[2]

    @property
    def deterministic(self) -> bool:
        return self.states is None

    @cached_property
    def y_reflected(self) -> np.ndarray:
        return oblique_projection(self.y, self.cost)

    @property
    def value0(self) -> np.ndarray:
        """Estimate of the reflected solution at the first node, per mode."""
        return self.y_reflected[0].mean(axis=0)

    @property
    def y0_raw(self) -> np.ndarray:
        return self.y[0].mean(axis=0)

    @cached_property
    def slack_sup(self) -> float:
        kk = self.cost.k
        n = kk.shape[0]
        worst = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    worst = max(worst, float(np.max(self.y[..., i] - self.y[..., j]) - kk[i, j]))
        return worst


@dataclass
class PenaltySweepReport:
    m_values: list
    slack_sup: list = field(default_factory=list)
    y0: list = field(default_factory=list)
    violations: int = 0
    max_violation: float = 0.0
    slope: Optional[float] = None
    sup_norm: list = field(default_factory=list)
    verdict: str = "incomplete"
    solutions: list = field(default_factory=list, repr=False)

    def rows(self):
        for m, s, y0 in zip(self.m_values, self.slack_sup, self.y0):
            yield [m, s, *list(np.atleast_1d(y0)), self.slope]


# ---------------------------------------------------------------------------
# driver


def penalized_driver(gen, k, m: float, t, y, z_i, i: int, path=None):
    """``g_i(t, y, z_i) - m sum_l (y_i - y_l - k_il)^+``.

    ``y`` has shape ``(..., n)`` and ``z_i`` ``(..., d)``.
    """
    if m < 0:
        raise ValueError("penalty weight must be non-negative")
    kk = np.asarray(k.k if isinstance(k, CostMatrix) else k)
    y = np.asarray(y, dtype=float)
    z_i = np.asarray(z_i, dtype=float)
    out = np.asarray(gen.h(t, y, path))[..., i] + gen.f(t, z_i)
    if gen.linear_z is not None:
        out = out + np.sum(z_i * np.asarray(gen.linear_z(t, path))[..., i, :], axis=-1)
    return out - m * np.maximum(y[..., i, None] - y - kk[i], 0.0).sum(axis=-1)


def _solve_one_mode(rhs, breakpoints, mdt):
    """Solve ``y + mdt * sum_r (y - b_r)^+ = rhs`` exactly (piecewise linear, increasing)."""
    if breakpoints.shape[-1] == 0 or mdt == 0.0:
        return rhs
    b = np.sort(breakpoints, axis=-1)
    r = b.shape[-1]
    csum = np.cumsum(b, axis=-1)
    idx = np.arange(r)
    # g(b_(r)) = b_(r) + mdt * sum_{s < r}(b_(r) - b_(s)) - rhs
    below = b * idx - (csum - b)
    g_at = b + mdt * below - rhs[..., None]
    j = np.sum(g_at < 0.0, axis=-1)  # number of active breakpoints
    sums = np.concatenate([np.zeros(rhs.shape + (1,)), csum], axis=-1)
    s_j = np.take_along_axis(sums, j[..., None], axis=-1)[..., 0]
    return (rhs + mdt * s_j) / (1.0 + mdt * j)


def implicit_penalty_step(rhs, y, mdt: float, k) -> np.ndarray:
    """One Jacobi sweep for ``y_i + mdt sum_l (y_i - y_l - k_il)^+ = rhs_i``.

    Each mode is solved exactly given the current values of the others.
    """
    kk = np.asarray(k)
    n = kk.shape[0]
    out = np.empty_like(rhs)
    for i in range(n):
        others = [l for l in range(n) if l != i]
        bp = y[..., others] + kk[i, others]
        out[..., i] = _solve_one_mode(rhs[..., i], bp, mdt)
    return out


# ---------------------------------------------------------------------------
# forward simulation and regression designs


def simulate_forward(problem: RbsdeProblem, numerics: Numerics) -> StatePaths:
    if numerics.seed is None:
        raise ValueError("a seed is required for Monte Carlo runs")
    grid = numerics.grid(problem)
    paths = simulate_brownian(grid, numerics.num_paths, numerics.seed, problem.d)
    dyn = problem.dynamics
    if isinstance(dyn, Markovian):
        return simulate_functional_sde(dyn.sigma, dyn.x0, paths, dyn.drift)
    x = np.zeros((numerics.num_paths, grid.steps + 1, problem.d))
    return StatePaths(grid=grid, x=x, paths=paths)


def make_design(feats, numerics: Numerics, rows: Optional[int] = None):
    """Regression design selected by ``numerics.regression``.

    Polynomial designs fall back to a constant basis when ``rows`` is too
    small for the full basis.
    """
    if numerics.regression == "kernel":
        return KernelDesign(feats, numerics.kernel_bins, clip=numerics.feature_clip)
    basis = PolynomialBasis.default(feats.shape[1], numerics.basis_degree)
    if rows is not None and rows <= 2 * len(basis.exponents(feats.shape[1])):
        basis = PolynomialBasis(0)
    return RegressionDesign(feats, basis, numerics.ridge_lambda, clip=numerics.feature_clip)


class DesignCache:
    """Per-node regression designs on a fixed set of paths.

    Designs are kept while their total size stays under ``max_bytes``.
    """

    def __init__(self, states: StatePaths, numerics: Numerics, max_bytes: float = 2e8):
        self.states = states
        self.numerics = numerics
        self.max_bytes = max_bytes
        self._store = {}
        self._bytes = 0

    def features(self, k: int) -> np.ndarray:
        w = max(1, self.numerics.window)
        x = self.states.x[:, max(0, k - w + 1): k + 1, :]
        return x.reshape(x.shape[0], -1)

    def __call__(self, k: int) -> RegressionDesign:
        if k in self._store:
            return self._store[k]
        design = make_design(self.features(k), self.numerics)
        size = design.A.nbytes * 2
        if self._bytes + size <= self.max_bytes:
            self._store[k] = design
            self._bytes += size
        return design


def _clip_norm(z, cap):
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    over = norm > cap
    scale = np.where(over, cap / np.maximum(norm, 1e-300), 1.0)
    return z * scale, over[..., 0]


def default_z_clip(problem: RbsdeProblem) -> float:
    return 10.0 * problem.gen.gamma * (1.0 + problem.terminal.bound)


# ---------------------------------------------------------------------------
# backward scheme


def _backward_mc(problem: RbsdeProblem, m: float, numerics: Numerics, states: StatePaths,
                 designs: Optional[DesignCache] = None):
    gen, kk = problem.gen, problem.cost.k
    grid = states.grid
    dt = grid.dt
    if m * dt > numerics.mc_stiffness_cap:
        need = int(np.ceil(m * problem.horizon / numerics.mc_stiffness_cap))
        raise detgrid.StiffnessError(
            f"m * dt = {m * dt:.3g} exceeds {numerics.mc_stiffness_cap}; use at least {need} steps", need)
    designs = designs or DesignCache(states, numerics)
    P, N1, d = states.x.shape
    N, n = N1 - 1, problem.n
    t = grid.nodes
    z_clip = numerics.z_clip if numerics.z_clip is not None else default_z_clip(problem)
    tol = numerics.picard_tol if numerics.picard_tol is not None else 1e-8

    y = np.empty((N + 1, P, n))
    z = np.zeros((N + 1, P, n, d))
    y[N] = problem.terminal_values(states.x)
    # pathwise xi + sum of driver increments; its mean is the node-0 value
    acc = y[N].copy()
    clipped = 0
    max_iters = 0
    for k in range(N - 1, -1, -1):
        design = designs(k)
        hist = states.history(k)
        nxt = y[k + 1]
        cond = design.project(nxt)
        dw = states.paths.dw[:, k]
        ztarget = (nxt - cond)[:, :, None] * dw[:, None, :] / dt
        zk = design.project(ztarget.reshape(P, n * d)).reshape(P, n, d)
        zc, over = _clip_norm(zk, z_clip)
        clipped += int(over.sum())
        fz = gen.f(t[k], zc)
        if gen.linear_z is not None:
            fz = fz + np.sum(zk * gen.linear_z(t[k], hist), axis=-1)
        cur = cond.copy()
        prev_diff = np.inf
        for it in range(1, numerics.picard_max + 1):
            rhs = cond + dt * (gen.h(t[k], cur, hist) + fz)
            new = implicit_penalty_step(rhs, cur, m * dt, kk)
            diff = float(np.max(np.abs(new - cur)))
            if diff > prev_diff:
                new = 0.5 * (new + cur)
            cur, prev_diff = new, diff
            if diff <= tol:
                break
        else:
            raise PicardError(f"Picard iteration did not converge at node {k} (residual {diff:.3e})", k, diff)
        max_iters = max(max_iters, it)
        y[k] = cur
        z[k] = zk
        acc += cur - cond
    z[N] = z[N - 1]
    rate = clipped / float(N * P * n)
    if rate > numerics.clip_warn_rate:
        logger.warning("z clipping active on %.2f%% of evaluations; the quadratic truncation is binding",
                       100 * rate)
    diag = {"picard_iters": max_iters, "clip_activation_rate": rate, "z_clip": z_clip}
    return y, z, diag, acc


def extract_increasing_process(solution: DiscreteSolution, problem: RbsdeProblem, m: float) -> np.ndarray:
    """``K_i(t) = m int_0^t sum_l (Y_i - Y_l - k_il)^+ ds`` by the trapezoid rule."""
    rate = m * detgrid.penalty(solution.y, problem.cost.k)
    return detgrid.cumulative_trapezoid(rate, solution.grid.nodes)


def skorokhod_residual(solution: DiscreteSolution, k) -> np.ndarray:
    """Per mode, ``sum_k (Y_i(t_k) - min_{j != i}(Y_j(t_k) + k_ij)) dK_i(t_k)``, path-averaged.

    ``dK_i(t_k) = K_i(t_{k+1}) - K_i(t_k)``.  Zero when ``K`` only grows on
    the obstacle.
    """
    kk = np.asarray(k.k if isinstance(k, CostMatrix) else k)
    n = kk.shape[0]
    if n == 1:
        return np.zeros(1)
    y = solution.y
    off = np.where(np.eye(n, dtype=bool), np.inf, kk)
    obstacle = np.min(y[..., None, :] + off, axis=-1)
    gap = (y - obstacle)[:-1]
    dk = np.diff(solution.k_cum, axis=0)
    return np.sum(gap * dk, axis=0).mean(axis=0)


def _finish(problem, solution: DiscreteSolution) -> DiscreteSolution:
    diag = solution.diagnostics
    diag["slack_sup"] = solution.slack_sup
    diag["skorokhod_residual"] = skorokhod_residual(solution, problem.cost).tolist()
    diag["sup_norm"] = float(np.max(np.abs(solution.y)))
    diag["k_terminal"] = solution.k_cum[-1].mean(axis=0).tolist()
    xi = problem.terminal_values(None if solution.states is None else solution.states.x)
    diag["terminal_match"] = float(np.max(np.abs(solution.y[-1] - np.reshape(xi, solution.y[-1].shape))))
    return solution


def solve_penalized_bsde(problem: RbsdeProblem, m: float, numerics: Numerics,
                         states: Optional[StatePaths] = None,
                         designs: Optional[DesignCache] = None) -> DiscreteSolution:
    """Solve the penalised system for one penalty weight.

    In the Monte Carlo regime, per node: ``Z = E[(Y_{k+1} - E[Y_{k+1}|X_k]) dW_k / dt | X_k]``
    and ``Y_k = E[Y_{k+1}|X_k] + dt * driver(Y_k, Z_k)``, the latter solved by
    Picard iteration with the penalty treated implicitly.
    """
    if m < 0:
        raise ValueError("penalty weight must be non-negative")
    grid = numerics.grid(problem)
    if problem.deterministic and not numerics.force_mc:
        det = detgrid.solve_penalized_ode(problem, m, grid, numerics.stiffness_cap)
        sol = DiscreteSolution(
            grid=grid, m=float(m), cost=problem.cost, y=det.y[:, None, :],
            z=np.zeros((grid.steps + 1, 1, problem.n, problem.d)), k_cum=det.k_cum[:, None, :],
            diagnostics={"picard_iters": 0, "clip_activation_rate": 0.0, "regime": "deterministic"},
            y0_se=np.zeros(problem.n))
        return _finish(problem, sol)
    if states is None:
        states = simulate_forward(problem, numerics)
    y, z, diag, acc = _backward_mc(problem, m, numerics, states, designs)
    diag["regime"] = "monte_carlo"
    sol = DiscreteSolution(grid=states.grid, m=float(m), cost=problem.cost, y=y, z=z,
                           k_cum=np.zeros_like(y), diagnostics=diag, states=states,
                           y0_se=acc.std(axis=0, ddof=1) / np.sqrt(acc.shape[0]), y0_paths=acc)
    sol.k_cum = extract_increasing_process(sol, problem, m)
    return _finish(problem, sol)


# ---------------------------------------------------------------------------
# sweeps and the reflected solution


def _log_slope(m_values, slack):
    m = np.asarray(m_values, dtype=float)
    s = np.asarray(slack, dtype=float)
    ok = s > 0
    if ok.sum() < 2:
        return None
    return float(np.polyfit(np.log(m[ok]), np.log(s[ok]), 1)[0])


def monotonicity_violations(sol_lo: DiscreteSolution, sol_hi: DiscreteSolution,
                            designs: Optional[DesignCache] = None, det_tol: float = 1e-9,
                            n_se: float = 2.0):
    """Count nodes/paths/modes where ``Y^{m} < Y^{m'}`` (``m < m'``) beyond tolerance.

    Deterministic runs use an absolute tolerance.  Monte Carlo runs use
    ``n_se`` pathwise standard errors of the regression that produced the
    difference at each node, on top of the same absolute floor (the Picard
    tolerance leaves round-off where the difference is exactly zero).
    """
    diff = sol_lo.y - sol_hi.y
    if sol_lo.deterministic:
        bad = diff < -det_tol
        worst = float(max(0.0, -diff.min()))
        return int(bad.sum()), worst
    N = diff.shape[0] - 1
    count, worst = 0, 0.0
    for k in range(N):
        fit = designs(k).fit(diff[k + 1])
        se = fit.pathwise_se()
        excess = -diff[k] - n_se * se - det_tol
        count += int((excess > 0).sum())
        worst = max(worst, float(excess.max()))
    return count, max(worst, 0.0)


def penalty_sweep(problem: RbsdeProblem, m_values: Sequence[float], numerics: Numerics,
                  states: Optional[StatePaths] = None, slope_bound: float = -0.9) -> PenaltySweepReport:
    """Solve for every ``m`` on common paths; check monotonicity and slack decay."""
    m_values = [float(m) for m in m_values]
    if any(b <= a for a, b in zip(m_values, m_values[1:])) or m_values[0] < 1:
        raise ValueError("m_values must be strictly increasing and >= 1")
    report = PenaltySweepReport(m_values=m_values)
    designs = None
    if not (problem.deterministic and not numerics.force_mc):
        states = states if states is not None else simulate_forward(problem, numerics)
        designs = DesignCache(states, numerics)

    def run(m):
        return solve_penalized_bsde(problem, m, numerics, states=states, designs=designs)

    try:
        if numerics.workers > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(numerics.workers) as pool:
                sols = list(pool.map(run, m_values))
        else:
            sols = [run(m) for m in m_values]
    except Exception as exc:
        report.verdict = "failed"
        raise ConvergenceError(f"sweep aborted: {exc}", report) from exc
    for sol in sols:
        report.solutions.append(sol)
        report.slack_sup.append(sol.slack_sup)
        report.y0.append(sol.y0_raw)
        report.sup_norm.append(sol.diagnostics["sup_norm"])
    for a, b in itertools.combinations(range(len(sols)), 2):
        c, w = monotonicity_violations(sols[a], sols[b], designs)
        report.violations += c
        report.max_violation = max(report.max_violation, w)
    report.slope = _log_slope(m_values, report.slack_sup)
    decays = report.slope is None and max(report.slack_sup) == 0.0 or (
        report.slope is not None and report.slope <= slope_bound)
    report.verdict = "converging" if decays and report.violations == 0 else "suspect"
    return report


def solve_rbsde(problem: RbsdeProblem, numerics: Numerics, m_max: float = 256.0,
                slack_tol: float = 1e-2, states: Optional[StatePaths] = None,
                m_start: Optional[float] = None) -> DiscreteSolution:
    """Double ``m`` until the constraint slack is below ``slack_tol``.

    Returns the last penalised solution with its certification diagnostics.
    Problems whose cost matrix fails (A2)/(A3) are rejected when the problem
    is constructed.
    """
    m = float(m_start if m_start is not None else numerics.m_start)
    designs = None
    if not (problem.deterministic and not numerics.force_mc):
        states = states if states is not None else simulate_forward(problem, numerics)
        designs = DesignCache(states, numerics)
    history = PenaltySweepReport(m_values=[])
    while True:
        sol = solve_penalized_bsde(problem, m, numerics, states=states, designs=designs)
        history.m_values.append(m)
        history.slack_sup.append(sol.slack_sup)
        history.y0.append(sol.y0_raw)
        if sol.slack_sup <= slack_tol:
            break
        if m * 2 > m_max:
            history.slope = _log_slope(history.m_values, history.slack_sup)
            history.verdict = "not converged"
            raise ConvergenceError(
                f"slack {sol.slack_sup:.3e} above {slack_tol:g} at m_max = {m_max:g}", history)
        m *= 2
    history.slope = _log_slope(history.m_values, history.slack_sup)
    history.verdict = "converged"
    sol.diagnostics["m_history"] = history.m_values
    sol.diagnostics["slack_history"] = history.slack_sup
    sol.diagnostics["certified"] = True
    return sol


def bmo_diagnostic(solution: DiscreteSolution, numerics: Numerics) -> float:
    """Max over nodes of the regressed remaining quadratic variation of ``Z . W``.

    Reported only; the square root of the returned value plays the role of a
    discrete BMO norm.
    """
    if solution.deterministic:
        return 0.0
    dt = solution.grid.dt
    q = np.sum(solution.z[:-1] ** 2, axis=-1) * dt  # (N, P, n)
    remaining = np.cumsum(q[::-1], axis=0)[::-1]
    designs = DesignCache(solution.states, numerics, max_bytes=0)
    best = 0.0
    for k in range(remaining.shape[0]):
        best = max(best, float(designs(k).project(remaining[k]).max()))
    return float(np.sqrt(max(best, 0.0)))
