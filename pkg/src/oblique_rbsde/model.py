"""Domain types, structural validators and the geometry of the switching domain.

Modes are indexed from 0 throughout the package.  The domain is

    Q = {y in R^n : y_i < y_j + k[i, j] for all i != j}

and its closure is the polytope on which reflected solutions live.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LEVELS = ("A2", "A3", "A4")

DET_TOL = 1e-10
MC_TOL = 1e-6


class StructuralError(ValueError):
    """Input has the wrong shape or type for the requested operation."""


class ProblemValidationError(ValueError):
    """A problem fails one of the structural assumptions it must satisfy."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class ProjectionError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# cost matrix


@dataclass(frozen=True)
class CostMatrix:
    """Switching costs ``k[i, j]`` paid when leaving mode ``i`` for mode ``j``."""

    k: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.k, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] == 0:
            raise StructuralError(f"cost matrix must be square and non-empty, got shape {k.shape}")
        object.__setattr__(self, "k", _frozen(k))

    @property
    def n(self) -> int:
        return self.k.shape[0]

    def __getitem__(self, idx):
        return self.k[idx]


@dataclass(frozen=True)
class Violation:
    assumption: str
    indices: tuple
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    level: str
    violations: tuple = ()
    checks: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def witnesses(self, assumption: Optional[str] = None):
        return [v.indices for v in self.violations if assumption is None or v.assumption == assumption]

    def lines(self):
        out = [f"{name}: {'pass' if ok else 'FAIL'}" for name, ok in self.checks.items()]
        out += [f"  violation {v.assumption} at {v.indices}: {v.detail}" for v in self.violations]
        return out


def _as_cost(k) -> CostMatrix:
    return k if isinstance(k, CostMatrix) else CostMatrix(k)


def validate_cost_matrix(k, level: str = "A4") -> ValidationReport:
    """Check the switching-cost assumptions up to ``level``.

    ``A2``: zero diagonal, positive off-diagonal.  ``A3``: triangle
    inequality ``k[i,j] + k[j,l] >= k[i,l]`` over all triples.  ``A4``: the
    strict inequality over triples with ``i != j`` and ``j != l`` (the
    degenerate triples make the strict form false for every matrix).
    Each level includes the weaker ones.
    """
    if level not in LEVELS:
        raise ValueError(f"level must be one of {LEVELS}, got {level!r}")
    cost = _as_cost(k)
    kk, n = cost.k, cost.n
    violations = []
    checks = {}

    a2 = []
    for i in range(n):
        if kk[i, i] != 0.0:
            a2.append(Violation("A2", (i, i), f"k[{i},{i}] = {kk[i, i]:g} must be 0"))
        for j in range(n):
            if i != j and not kk[i, j] > 0.0:
                a2.append(Violation("A2", (i, j), f"k[{i},{j}] = {kk[i, j]:g} must be > 0"))
    violations += a2
    checks["A2"] = not a2

    if level in ("A3", "A4"):
        a3 = []
        for i, j, l in itertools.product(range(n), repeat=3):
            lhs = kk[i, j] + kk[j, l]
            if lhs < kk[i, l]:
                a3.append(Violation("A3", (i, j, l), f"{lhs:g} < k[{i},{l}] = {kk[i, l]:g}"))
        violations += a3
        checks["A3"] = not a3

    if level == "A4":
        a4 = []
        for i, j, l in itertools.product(range(n), repeat=3):
            if i == j or j == l:
                continue
            lhs = kk[i, j] + kk[j, l]
            if not lhs > kk[i, l]:
                a4.append(Violation("A4", (i, j, l), f"{lhs:g} <= k[{i},{l}] = {kk[i, l]:g}"))
        violations += a4
        checks["A4"] = not a4

    return ValidationReport(level=level, violations=tuple(violations), checks=checks)


# ---------------------------------------------------------------------------
# domain geometry


@dataclass(frozen=True)
class DomainStatus:
    status: str  # "interior" | "boundary" | "outside"
    active: tuple = ()
    violated: tuple = ()


def check_domain_membership(y, k, tol: float = DET_TOL) -> DomainStatus:
    cost = _as_cost(k)
    y = np.asarray(y, dtype=float)
    if y.shape != (cost.n,):
        raise StructuralError(f"y has shape {y.shape}, expected ({cost.n},)")
    gap = y[:, None] - y[None, :] - cost.k  # gap[i, j] = y_i - y_j - k_ij
    off = ~np.eye(cost.n, dtype=bool)
    violated = tuple(zip(*np.nonzero(off & (gap > tol))))
    active = tuple(zip(*np.nonzero(off & (np.abs(gap) <= tol))))
    violated = tuple((int(i), int(j)) for i, j in violated)
    active = tuple((int(i), int(j)) for i, j in active)
    if violated:
        return DomainStatus("outside", active, violated)
    if active:
        return DomainStatus("boundary", active, ())
    return DomainStatus("interior")


def constraint_residual(y, k) -> np.ndarray:
    """Largest violation ``max_{i != j} (y_i - y_j - k_ij)^+`` over the last axis."""
    kk = _as_cost(k).k
    y = np.asarray(y, dtype=float)
    gap = y[..., :, None] - y[..., None, :] - kk
    return np.maximum(gap, 0.0).max(axis=(-1, -2))


def project_to_domain(y, k, tol: float = DET_TOL, max_iter: int = 10_000) -> np.ndarray:
    """Euclidean projection onto the closed domain by Dykstra's algorithm.

    The half-spaces are ``y_i - y_j <= k_ij``; each has normal ``e_i - e_j``.
    """
    cost = _as_cost(k)
    y = np.asarray(y, dtype=float)
    if y.shape != (cost.n,):
        raise StructuralError(f"y has shape {y.shape}, expected ({cost.n},)")
    if constraint_residual(y, cost) <= tol:
        return y.copy()
    pairs = [(i, j) for i in range(cost.n) for j in range(cost.n) if i != j]
    x = y.copy()
    corr = np.zeros((len(pairs), cost.n))
    residual = np.inf
    for _ in range(max_iter):
        for c, (i, j) in enumerate(pairs):
            v = x + corr[c]
            excess = v[i] - v[j] - cost.k[i, j]
            p = v.copy()
            if excess > 0.0:
                p[i] -= 0.5 * excess
                p[j] += 0.5 * excess
            corr[c] = v - p
            x = p
        residual = float(constraint_residual(x, cost))
        if residual <= tol:
            return x
    raise ProjectionError(f"projection did not converge, residual {residual:.3e}", residual)


def oblique_projection(y, k, max_sweeps: Optional[int] = None) -> np.ndarray:
    """Push each coordinate down onto the domain along ``-e_i``.

    Replaces ``y_i`` by ``min_j (y_j + k_ij)`` until no coordinate moves.  This
    is the switching projection of the dynamic programme: the value of mode
    ``i`` is capped by switching to ``j`` and paying ``k_ij``.  Operates on
    the last axis, so any leading batch dimensions are allowed.
    """
    kk = _as_cost(k).k
    n = kk.shape[0]
    out = np.array(y, dtype=float, copy=True)
    for _ in range(max_sweeps or n + 1):
        new = np.min(out[..., None, :] + kk, axis=-1)
        new = np.minimum(out, new)
        if np.array_equal(new, out):
            break
        out = new
    return out


# ---------------------------------------------------------------------------
# generator, terminal condition, dynamics


@dataclass(frozen=True)
class GeneratorSpec:
    """Generator ``g_i(t, y, z) = h_i(t, y) + f(t, z) [+ <z, b_i(t, x)>]``.

    Callables are vectorised over leading axes:

    * ``h(t, y, path) -> (..., n)`` with ``y`` of shape ``(..., n)``.  In the
      diagonal case component ``i`` may only read ``y[..., i]``.
    * ``f(t, z) -> (...)`` with ``z`` of shape ``(..., d)``.
    * ``linear_z(t, path) -> (..., n, d)`` (optional).

    ``path`` is the state history up to the current node, shape
    ``(P, k + 1, d)``, or ``None`` in the deterministic regime.
    """

    n: int
    gamma: float
    h: Callable
    f: Callable
    linear_z: Optional[Callable] = None
    coupling: str = "diagonal"

    def __post_init__(self):
        if self.coupling not in ("diagonal", "coupled"):
            raise ValueError(f"coupling must be 'diagonal' or 'coupled', got {self.coupling!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def evaluate(self, t, y, z, path=None) -> np.ndarray:
        """All-mode generator values; ``z`` has shape ``(..., n, d)``."""
        out = self.h(t, y, path) + self.f(t, z)
        if self.linear_z is not None:
            out = out + np.sum(z * self.linear_z(t, path), axis=-1)
        return out


def zero_f(t, z):
    return np.zeros(np.shape(z)[:-1])


def quadratic_f(c: float = 1.0):
    """``f(t, z) = c/2 |z|^2``."""

    def f(t, z):
        return 0.5 * c * np.sum(np.square(z), axis=-1)

    return f


@dataclass(frozen=True)
class TerminalCondition:
    """``xi(path) -> (..., n)``; ``path`` is ``None`` for constant data."""

    xi: Callable
    bound: float

    @classmethod
    def constant(cls, value):
        value = _frozen(value)

        def xi(path=None):
            if path is None:
                return value.copy()
            return np.broadcast_to(value, (np.shape(path)[0], value.size)).copy()

        return cls(xi=xi, bound=float(np.max(np.abs(value))) if value.size else 0.0)


@dataclass(frozen=True)
class Deterministic:
    """Nothing random feeds the generator or the terminal value."""

    kind = "deterministic"


@dataclass(frozen=True)
class Markovian:
    """Forward state ``dX = sigma(t, X)(dW + drift dt)``, ``X(0) = x0``.

    ``sigma(t, path) -> (P, d, d)``, ``drift(t, path) -> (P, d)``.
    """

    x0: np.ndarray
    sigma: Callable
    drift: Optional[Callable] = None
    kind = "markovian"

    def __post_init__(self):
        object.__setattr__(self, "x0", _frozen(np.atleast_1d(self.x0)))


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError("grid needs T > t0")
        if int(self.steps) < 1:
            raise ValueError("grid needs at least one step")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.steps + 1)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.steps * int(factor))


@dataclass(frozen=True)
class RbsdeProblem:
    horizon: float
    n: int
    d: int
    cost: CostMatrix
    gen: GeneratorSpec
    terminal: TerminalCondition
    dynamics: object = field(default_factory=Deterministic)
    project_terminal: bool = False

    def __post_init__(self):
        if not self.horizon > 0:
            raise ProblemValidationError("horizon must be positive")
        if self.n < 1 or self.d < 1:
            raise ProblemValidationError("need n >= 1 modes and d >= 1 Brownian factors")
        cost = _as_cost(self.cost)
        object.__setattr__(self, "cost", cost)
        if cost.n != self.n:
            raise StructuralError(f"cost matrix is {cost.n}x{cost.n}, expected n = {self.n}")
        if self.gen.n != self.n:
            raise StructuralError(f"generator has {self.gen.n} modes, expected {self.n}")
        rep = validate_cost_matrix(cost, "A3")
        if not rep.passed:
            raise ProblemValidationError("cost matrix fails (A2)/(A3): " + "; ".join(rep.lines()), rep)
        if isinstance(self.dynamics, Markovian) and self.dynamics.x0.size != self.d:
            raise StructuralError("x0 dimension does not match brownian_dim")

    @property
    def deterministic(self) -> bool:
        return isinstance(self.dynamics, Deterministic)

    @property
    def unique_regime(self) -> bool:
        """Whether the strict triangle condition holds (the solution is then unique)."""
        return validate_cost_matrix(self.cost, "A4").passed

    def grid(self, steps: int) -> TimeGrid:
        return TimeGrid(0.0, self.horizon, steps)

    def terminal_values(self, path=None, tol: Optional[float] = None) -> np.ndarray:
        """Evaluate the terminal condition and enforce bound and domain membership."""
        xi = np.asarray(self.terminal.xi(path), dtype=float)
        if tol is None:
            tol = DET_TOL if path is None else MC_TOL
        if np.any(~np.isfinite(xi)):
            raise ProblemValidationError("terminal condition produced non-finite values")
        if np.max(np.abs(xi), initial=0.0) > self.terminal.bound + tol:
            raise ProblemValidationError(
                f"terminal values exceed declared bound {self.terminal.bound:g}")
        resid = constraint_residual(xi, self.cost)
        if np.max(resid, initial=0.0) > tol:
            if not self.project_terminal:
                raise ProblemValidationError(
                    f"terminal values leave the closed domain (residual {np.max(resid):.3e}); "
                    "set project_terminal to project them")
            logger.warning("projecting terminal values onto the domain (max residual %.3e)", np.max(resid))
            flat = xi.reshape(-1, self.n)
            bad = np.nonzero(np.atleast_1d(resid).reshape(-1) > tol)[0]
            for p in bad:
                flat[p] = project_to_domain(flat[p], self.cost, tol=tol * 1e-2)
            xi = flat.reshape(xi.shape)
        return xi


# ---------------------------------------------------------------------------
# sampling-based generator check


def check_generator(gen: GeneratorSpec, d: int, samples: int = 1000, radius: float = 10.0,
                    horizon: float = 1.0, seed: int = 0) -> ValidationReport:
    """Spot-check the growth and Lipschitz inequalities on random samples.

    For diagonal generators the ``y`` inequalities are checked per coordinate,
    for coupled ones against the Euclidean norm of the whole vector.  When a
    mode-dependent linear ``z`` term is present it is folded into ``f`` per
    mode.
    """
    rng = np.random.default_rng(seed)
    n, gam = gen.n, gen.gamma
    t = rng.uniform(0.0, horizon, samples)
    y = rng.uniform(-radius, radius, (samples, n))
    yb = rng.uniform(-radius, radius, (samples, n))
    z = rng.uniform(-radius, radius, (samples, d)) / np.sqrt(d)
    zb = rng.uniform(-radius, radius, (samples, d)) / np.sqrt(d)
    x = rng.uniform(-radius, radius, (samples, 1, d))
    slack = 1e-9
    violations = []

    def tcall(fn, *args):
        # callables take a scalar time; evaluate sample by sample in t but vectorised otherwise
        return np.stack([np.asarray(fn(t[s], *[a[s:s + 1] if a is not None else None for a in args]))[0]
                         for s in range(samples)])

    h = tcall(gen.h, y, x)
    hb = tcall(gen.h, yb, x)
    if gen.coupling == "diagonal":
        ynorm = np.abs(y)
        dist = np.abs(y - yb)
    else:
        ynorm = np.repeat(np.linalg.norm(y, axis=1, keepdims=True), n, axis=1)
        dist = np.repeat(np.linalg.norm(y - yb, axis=1, keepdims=True), n, axis=1)
    bad = np.abs(h) > gam * (1 + ynorm) + slack
    if bad.any():
        s, i = np.argwhere(bad)[0]
        violations.append(Violation("growth_h", (int(i),), f"|h| = {abs(h[s, i]):.4g} at sample {s}"))
    bad = np.abs(h - hb) > gam * dist + slack
    if bad.any():
        s, i = np.argwhere(bad)[0]
        violations.append(Violation("lipschitz_h", (int(i),), f"h increment {abs(h[s, i] - hb[s, i]):.4g} "
                                    f"> gamma * {dist[s, i]:.4g}"))

    def fmode(zz):
        base = np.stack([np.asarray(gen.f(t[s], zz[s:s + 1]))[0] for s in range(samples)])
        base = np.repeat(base[:, None], n, axis=1)
        if gen.linear_z is not None:
            b = tcall(gen.linear_z, x)  # (S, n, d)
            base = base + np.einsum("snd,sd->sn", b, zz)
        return base

    fz, fzb = fmode(z), fmode(zb)
    zn = np.linalg.norm(z, axis=1)[:, None]
    zbn = np.linalg.norm(zb, axis=1)[:, None]
    dz = np.linalg.norm(z - zb, axis=1)[:, None]
    bad = np.abs(fz) > gam * (1 + zn ** 2) + slack
    if bad.any():
        s, i = np.argwhere(bad)[0]
        violations.append(Violation("growth_f", (int(i),), f"|f| = {abs(fz[s, i]):.4g} at sample {s}"))
    bad = np.abs(fz - fzb) > gam * (1 + zn + zbn) * dz + slack
    if bad.any():
        s, i = np.argwhere(bad)[0]
        violations.append(Violation("lipschitz_f", (int(i),), f"f increment {abs(fz[s, i] - fzb[s, i]):.4g}"))

    name = "A1" if gen.coupling == "diagonal" else "A5"
    checks = {name: not violations}
    if gen.linear_z is not None:
        checks["linear_z_extension"] = True
    return ValidationReport(level=name, violations=tuple(violations), checks=checks)


# ---------------------------------------------------------------------------
# small built-in generator forms


def affine_h(intercept: Sequence[float], slope=None, matrix=None):
    """``h_i(t, y) = a_i + c_i y_i`` (diagonal) or ``a_i + sum_j C_ij y_j`` (coupled)."""
    a = _frozen(intercept)
    if matrix is not None:
        C = _frozen(matrix)

        def h(t, y, path=None):
            return a + np.asarray(y) @ C.T
    else:
        c = _frozen(slope if slope is not None else np.zeros_like(a))

        def h(t, y, path=None):
            return a + c * np.asarray(y)
    return h
