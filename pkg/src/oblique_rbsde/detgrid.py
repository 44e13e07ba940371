"""Deterministic regime: with no randomness feeding the data, Z vanishes and the
penalised system is a backward ODE.  Also hosts the dynamic-programming
value of the switching problem used as an oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import RbsdeProblem, TimeGrid, oblique_projection

STIFFNESS_CAP = 0.5


class StiffnessError(ValueError):
    def __init__(self, message, required_steps):
        super().__init__(message)
        self.required_steps = required_steps


@dataclass(frozen=True)
class DetSolution:
    grid: TimeGrid
    y: np.ndarray  # (N + 1, n)
    k_cum: np.ndarray  # (N + 1, n)
    m: float


def _require_deterministic(problem: RbsdeProblem):
    if not problem.deterministic:
        raise ValueError("the deterministic engine needs a problem with deterministic dynamics")


def _drift(problem: RbsdeProblem):
    gen = problem.gen
    z0 = np.zeros((problem.n, problem.d))

    def g(t, y):
        return gen.h(t, y, None) + gen.f(t, z0)

    return g


def penalty(y, k) -> np.ndarray:
    """``sum_l (y_i - y_l - k_il)^+`` for every mode, on the last axis."""
    kk = np.asarray(k)
    return np.maximum(y[..., :, None] - y[..., None, :] - kk, 0.0).sum(axis=-1)


def _rk4_backward(rhs, y_end, nodes):
    """Integrate ``dy/dt = -rhs(t, y)`` from the last node back to the first."""
    N = len(nodes) - 1
    y = np.empty((N + 1,) + np.shape(y_end))
    y[N] = y_end
    for k in range(N - 1, -1, -1):
        t1, dt = nodes[k + 1], nodes[k + 1] - nodes[k]
        th = t1 - 0.5 * dt
        cur = y[k + 1]
        k1 = rhs(t1, cur)
        k2 = rhs(th, cur + 0.5 * dt * k1)
        k3 = rhs(th, cur + 0.5 * dt * k2)
        k4 = rhs(nodes[k], cur + dt * k3)
        y[k] = cur + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def cumulative_trapezoid(rate, nodes):
    """Running trapezoid integral along axis 0, starting at zero."""
    out = np.zeros_like(rate)
    dt = np.diff(nodes).reshape((-1,) + (1,) * (rate.ndim - 1))
    out[1:] = np.cumsum(0.5 * (rate[1:] + rate[:-1]) * dt, axis=0)
    return out


def solve_penalized_ode(problem: RbsdeProblem, m: float, grid: TimeGrid,
                        stiffness_cap: float = STIFFNESS_CAP) -> DetSolution:
    """Classical RK4 for ``dY_i/dt = -[h_i(t, Y) + f(t, 0) - m sum_l (Y_i - Y_l - k_il)^+]``."""
    _require_deterministic(problem)
    if m < 0:
        raise ValueError("penalty weight must be non-negative")
    if m * grid.dt > stiffness_cap:
        need = int(np.ceil(m * (grid.T - grid.t0) / stiffness_cap))
        raise StiffnessError(f"m * dt = {m * grid.dt:.3g} exceeds {stiffness_cap}; use at least {need} steps",
                             need)
    g = _drift(problem)
    kk = problem.cost.k

    def rhs(t, y):
        return g(t, y) - m * penalty(y, kk)

    xi = problem.terminal_values(None)
    y = _rk4_backward(rhs, xi, grid.nodes)
    k_cum = cumulative_trapezoid(m * penalty(y, kk), grid.nodes)
    return DetSolution(grid=grid, y=y, k_cum=k_cum, m=float(m))


def dp_switching_value(problem: RbsdeProblem, grid: TimeGrid) -> np.ndarray:
    """Backward Bellman recursion with operator splitting.

    Each step advances the unswitched dynamics by one RK4 step, then caps each
    mode by the cheapest switch, iterated to a fixed point.  With a
    ``y``-independent generator the dynamics step is the plain increment
    ``[h_i + f(., 0)] dt``.
    """
    _require_deterministic(problem)
    g = _drift(problem)
    kk = problem.cost.k
    nodes = grid.nodes
    N = grid.steps
    v = np.empty((N + 1, problem.n))
    v[N] = problem.terminal_values(None)
    for k in range(N - 1, -1, -1):
        step = _rk4_backward(g, v[k + 1], nodes[k: k + 2])[0]
        v[k] = oblique_projection(step, kk)
    return v


# ---------------------------------------------------------------------------
# switched ODE


def switched_ode_batch(problem: RbsdeProblem, modes, costs, grid: TimeGrid, terminal_modes=None):
    """Values ``U^a(t0)`` for a batch of grid-snapped strategies.

    ``modes`` is ``(S, N)`` (active mode on each step), ``costs`` is ``(S, N + 1)``
    (right-continuous cumulative switching cost at each node).  Integrates the
    shifted variable ``U + A`` backward with RK4; within a step the mode and
    ``A`` are constant.
    """
    _require_deterministic(problem)
    modes = np.atleast_2d(np.asarray(modes, dtype=int))
    costs = np.atleast_2d(np.asarray(costs, dtype=float))
    S, N = modes.shape
    if N != grid.steps or costs.shape != (S, N + 1):
        raise ValueError("strategy arrays do not match the grid")
    g = _drift(problem)
    n = problem.n
    rows = np.arange(S)
    xi = problem.terminal_values(None)
    last = modes[:, -1] if terminal_modes is None else np.asarray(terminal_modes, dtype=int)
    ut = xi[last] + costs[:, -1]  # shifted variable U + A at T
    nodes = grid.nodes
    for k in range(N - 1, -1, -1):
        a_k, A_k = modes[:, k], costs[:, k]

        def rhs(t, u):
            y = np.repeat((u - A_k)[:, None], n, axis=1)
            return g(t, y)[rows, a_k]

        ut = _rk4_backward(rhs, ut, nodes[k: k + 2])[0]
    # cost paid by switches at t0 counts towards the value: U^a(t0) = (U + A)(t0) - A(t0-)
    return ut


def solve_switched_ode(problem: RbsdeProblem, strategy, grid: TimeGrid, refine: int = 1) -> float:
    """Value ``U^a(t0)`` of one grid-snapped strategy.

    ``refine`` subdivides each step of ``grid`` for the integration while the
    switch nodes stay on the coarse grid.
    """
    strategy.check_admissible(grid.steps)
    s = strategy.refine(refine) if refine > 1 else strategy
    g = grid.refine(refine) if refine > 1 else grid
    modes = s.modes_on_steps(g.steps)[None, :]
    costs = s.cost_on_nodes(problem.cost, g.steps)[None, :]
    return float(switched_ode_batch(problem, modes, costs, g)[0])
