"""Brownian paths, Euler-Maruyama forward dynamics, stochastic exponentials
and least-squares conditional expectations."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse

from .model import TimeGrid

logger = logging.getLogger(__name__)

# paths are drawn in fixed-size blocks, each from its own Philox stream keyed
# by (seed, block); path p always comes from row p % BLOCK of block p // BLOCK
BLOCK = 4096


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathBundle:
    grid: TimeGrid
    num_paths: int
    dw: np.ndarray  # (P, N, d)
    seed: int

    @property
    def d(self) -> int:
        return self.dw.shape[2]

    @property
    def w(self) -> np.ndarray:
        """Brownian paths including ``W(t0) = 0``, shape ``(P, N + 1, d)``."""
        out = np.zeros((self.num_paths, self.grid.steps + 1, self.d))
        np.cumsum(self.dw, axis=1, out=out[:, 1:])
        return out


@dataclass(frozen=True)
class StatePaths:
    grid: TimeGrid
    x: np.ndarray  # (P, N + 1, d)
    paths: PathBundle

    def history(self, k: int) -> np.ndarray:
        return self.x[:, : k + 1, :]


def _block_stream(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))


def simulate_brownian(grid: TimeGrid, num_paths: int, seed: int, d: int = 1) -> PathBundle:
    if num_paths < 1:
        raise ValueError("num_paths must be >= 1")
    if seed is None:
        raise ValueError("a seed is required")
    N = grid.steps
    dw = np.empty((num_paths, N, d))
    sd = np.sqrt(grid.dt)
    for b in range((num_paths + BLOCK - 1) // BLOCK):
        lo, hi = b * BLOCK, min((b + 1) * BLOCK, num_paths)
        draw = _block_stream(int(seed), b).standard_normal((BLOCK, N, d))
        dw[lo:hi] = draw[: hi - lo] * sd
    dw.setflags(write=False)
    return PathBundle(grid=grid, num_paths=num_paths, dw=dw, seed=int(seed))


def simulate_functional_sde(sigma, x0, paths: PathBundle, drift=None) -> StatePaths:
    """Euler-Maruyama for ``X_{k+1} = X_k + sigma(t_k, X_{<=k}) (dW_k + drift_k dt)``.

    ``sigma(t, history) -> (P, d, d)`` and ``drift(t, history) -> (P, d)``
    receive the discrete past path ``X[:, :k + 1]``.
    """
    grid = paths.grid
    P, N, d = paths.dw.shape
    t = grid.nodes
    x = np.empty((P, N + 1, d))
    x[:, 0] = np.broadcast_to(np.asarray(x0, dtype=float), (P, d))
    for k in range(N):
        hist = x[:, : k + 1]
        s = np.broadcast_to(np.asarray(sigma(t[k], hist), dtype=float), (P, d, d))
        inc = paths.dw[:, k]
        if drift is not None:
            inc = inc + np.broadcast_to(drift(t[k], hist), (P, d)) * grid.dt
        x[:, k + 1] = x[:, k] + np.einsum("pij,pj->pi", s, inc)
        bad = ~np.isfinite(x[:, k + 1]).all(axis=1)
        if bad.any():
            p = int(np.argmax(bad))
            raise SimulationError(f"non-finite state on path {p} at step {k + 1}")
    return StatePaths(grid=grid, x=x, paths=paths)


def girsanov_weights(b, modes, states: StatePaths) -> np.ndarray:
    """Discrete stochastic exponential of ``b_{a(t)}(t, X) . W`` per path.

    ``b(t, history) -> (P, n, d)``; ``modes`` is the active mode on each
    step, an integer array broadcastable to ``(P, N)``.  Integrands are
    evaluated at the left end of each step.
    """
    grid = states.grid
    dw = states.paths.dw
    P, N, d = dw.shape
    modes = np.broadcast_to(np.asarray(modes, dtype=int), (P, N))
    t = grid.nodes
    log_w = np.zeros(P)
    rows = np.arange(P)
    for k in range(N):
        bk = np.asarray(b(t[k], states.history(k)), dtype=float)
        bk = np.broadcast_to(bk, (P,) + bk.shape[-2:])[rows, modes[:, k]]
        log_w += np.einsum("pd,pd->p", bk, dw[:, k]) - 0.5 * np.sum(bk * bk, axis=1) * grid.dt
    w = np.exp(log_w)
    if not np.all(np.isfinite(w)):
        raise SimulationError("non-finite Girsanov weight")
    return w


# ---------------------------------------------------------------------------
# regression


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomials in standardised features.

    ``degree`` is the total degree.  With ``pairwise_only`` the basis is the
    per-coordinate powers up to ``degree`` plus all pairwise products, the
    guard used for larger state dimensions.
    """

    degree: int = 3
    pairwise_only: bool = False

    @classmethod
    def default(cls, dim: int, degree: Optional[int] = None) -> "PolynomialBasis":
        if dim <= 2:
            return cls(3 if degree is None else degree)
        return cls(2 if degree is None else degree, pairwise_only=True)

    def exponents(self, dim: int):
        if dim == 0 or self.degree == 0:
            return [(0,) * dim]
        if self.pairwise_only:
            exps = [(0,) * dim]
            for j in range(dim):
                for p in range(1, self.degree + 1):
                    e = [0] * dim
                    e[j] = p
                    exps.append(tuple(e))
            for a, c in itertools.combinations(range(dim), 2):
                e = [0] * dim
                e[a] = e[c] = 1
                exps.append(tuple(e))
            return exps
        exps = [e for e in itertools.product(range(self.degree + 1), repeat=dim) if sum(e) <= self.degree]
        return sorted(exps, key=lambda e: (sum(e), tuple(-v for v in e)))

    def design(self, u: np.ndarray) -> np.ndarray:
        P, dim = u.shape
        cols = []
        for e in self.exponents(dim):
            c = np.ones(P)
            for j, p in enumerate(e):
                if p:
                    c = c * u[:, j] ** p
            cols.append(c)
        return np.column_stack(cols)


@dataclass(frozen=True)
class FittedRegression:
    """Evaluator for a fitted conditional expectation."""

    basis: PolynomialBasis
    keep: np.ndarray  # feature columns with non-zero spread
    shift: np.ndarray
    scale: np.ndarray
    coef: np.ndarray  # (p, q)
    method: str
    fitted: np.ndarray  # in-sample fitted values, (P, q)
    leverage: np.ndarray  # diagonal of the hat matrix, (P,)
    resid_std: np.ndarray  # (q,)
    clip: Optional[float] = None

    def __call__(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=float))
        u = (features[:, self.keep] - self.shift) / self.scale
        if self.clip is not None:
            u = np.clip(u, -self.clip, self.clip)
        return self.basis.design(u) @ self.coef

    def pathwise_se(self) -> np.ndarray:
        """Standard error of each in-sample fitted value, ``(P, q)``."""
        return np.sqrt(self.leverage)[:, None] * self.resid_std[None, :]


class RegressionDesign:
    """Factorised design matrix, reusable across many target vectors."""

    def __init__(self, features, basis: Optional[PolynomialBasis] = None, ridge_lambda: float = 1e-8,
                 rank_rtol: float = 1e-10, clip: Optional[float] = None):
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        P, dim = features.shape
        self.basis = basis or PolynomialBasis.default(dim)
        spread = features.std(axis=0)
        mean = features.mean(axis=0)
        self.keep = spread > 1e-12 * np.maximum(1.0, np.abs(mean))
        self.shift = mean[self.keep]
        self.scale = spread[self.keep]
        self.clip = clip
        u = (features[:, self.keep] - self.shift) / self.scale
        if clip is not None:
            u = np.clip(u, -clip, clip)
        A = self.basis.design(u)
        if P <= A.shape[1]:
            raise ValueError(f"need more paths ({P}) than basis functions ({A.shape[1]})")
        self.A = A
        q, r, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
        diag = np.abs(np.diag(r))
        rank = int(np.sum(diag > rank_rtol * diag[0])) if diag.size else 0
        self.rank = rank
        if rank == A.shape[1]:
            self.method = "qr"
            self._q, self._r, self._piv = q, r, piv
            self.leverage = np.sum(q * q, axis=1)
        else:
            logger.warning("regression design rank %d < %d, using ridge fallback (lambda=%g)",
                           rank, A.shape[1], ridge_lambda)
            self.method = "ridge"
            lam = ridge_lambda * max(1.0, float(np.max(diag)) ** 2)
            G = A.T @ A + lam * np.eye(A.shape[1])
            self._chol = scipy.linalg.cho_factor(G)
            self.leverage = np.einsum("pi,pi->p", A, scipy.linalg.cho_solve(self._chol, A.T).T)

    @property
    def p(self) -> int:
        return self.A.shape[1]

    def coefficients(self, targets) -> np.ndarray:
        y = np.asarray(targets, dtype=float)
        y2 = y.reshape(y.shape[0], -1)
        if self.method == "qr":
            c = scipy.linalg.solve_triangular(self._r, self._q.T @ y2)
            coef = np.empty_like(c)
            coef[self._piv] = c
        else:
            coef = scipy.linalg.cho_solve(self._chol, self.A.T @ y2)
        return coef

    def project(self, targets) -> np.ndarray:
        """In-sample fitted values, same shape as ``targets``."""
        y = np.asarray(targets, dtype=float)
        return (self.A @ self.coefficients(y)).reshape(y.shape)

    def fit(self, targets) -> FittedRegression:
        y = np.asarray(targets, dtype=float)
        y2 = y.reshape(y.shape[0], -1)
        coef = self.coefficients(y2)
        fitted = self.A @ coef
        dof = max(y2.shape[0] - self.p, 1)
        resid_std = np.sqrt(np.sum((y2 - fitted) ** 2, axis=0) / dof)
        return FittedRegression(self.basis, self.keep, self.shift, self.scale, coef, self.method,
                                fitted, self.leverage, resid_std, self.clip)


def regress_conditional_expectation(targets, features, basis: Optional[PolynomialBasis] = None,
                                    ridge_lambda: float = 1e-8) -> FittedRegression:
    """Least-squares fit of ``targets`` on basis functions of ``features``."""
    return RegressionDesign(features, basis, ridge_lambda).fit(targets)


@dataclass(frozen=True)
class KernelFit:
    """Evaluator for a hat-kernel smoother fit."""

    design: "KernelDesign"
    averages: np.ndarray  # per grid node, (B, q)
    fitted: np.ndarray  # (P, q)
    leverage: np.ndarray  # sum of squared smoother weights per path, (P,)
    resid_std: np.ndarray  # (q,)
    method: str = "kernel"

    def __call__(self, features) -> np.ndarray:
        w = self.design.weights(features)
        w = w.multiply(self.design.occupied[None, :]).tocsr()
        norm = np.asarray(w.sum(axis=1)).ravel()
        return (w @ self.averages) / np.maximum(norm, 1e-300)[:, None]

    def pathwise_se(self) -> np.ndarray:
        return np.sqrt(self.leverage)[:, None] * self.resid_std[None, :]


class KernelDesign:
    """Positivity-preserving smoother on a tensor grid of hat functions.

    Features are standardised and clipped to ``[-clip, clip]``; each grid
    node carries the hat-weighted average of the targets and fitted values
    interpolate those averages with the same hats.  The operator is
    positive, reproduces constants and preserves the sample mean, so
    ordering between targets carries over to the fitted values.
    """

    def __init__(self, features, bins: int = 24, clip: Optional[float] = None):
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        P, dim = features.shape
        spread = features.std(axis=0)
        mean = features.mean(axis=0)
        self.keep = spread > 1e-12 * np.maximum(1.0, np.abs(mean))
        self.shift = mean[self.keep]
        self.scale = spread[self.keep]
        self.clip = 3.0 if clip is None else float(clip)
        self.dim = int(self.keep.sum())
        self.bins = int(bins) if self.dim else 1
        if self.bins < 2 and self.dim:
            raise ValueError("kernel smoother needs at least 2 grid nodes per axis")
        W = self.weights(features)
        self.W = W
        self.counts = np.asarray(W.sum(axis=0)).ravel()
        self.occupied = (self.counts > 0).astype(float)
        inv = np.where(self.counts > 0, 1.0 / np.maximum(self.counts, 1e-300), 0.0)
        self._inv = inv
        G = (W.T @ W).tocsr()
        DW = W.multiply(inv[None, :]).tocsr()
        self.leverage = np.asarray(DW.multiply(DW @ G).sum(axis=1)).ravel()
        self.trace = float(np.asarray(W.multiply(W).multiply(inv[None, :]).sum()))
        # size proxy for design caches
        self.A = W.data

    @property
    def p(self) -> int:
        return int(self.occupied.sum())

    def weights(self, features):
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        P = features.shape[0]
        if self.dim == 0:
            return scipy.sparse.csr_matrix(np.ones((P, 1)))
        u = (features[:, self.keep] - self.shift) / self.scale
        u = np.clip(u, -self.clip, self.clip)
        h = 2 * self.clip / (self.bins - 1)
        s = (u + self.clip) / h
        lo = np.minimum(np.floor(s).astype(int), self.bins - 2)
        frac = s - lo
        rows, cols, vals = [], [], []
        for corner in itertools.product((0, 1), repeat=self.dim):
            c = np.asarray(corner)
            idx = np.zeros(P, dtype=int)
            w = np.ones(P)
            for j in range(self.dim):
                idx = idx * self.bins + lo[:, j] + c[j]
                w = w * (frac[:, j] if c[j] else 1.0 - frac[:, j])
            rows.append(np.arange(P))
            cols.append(idx)
            vals.append(w)
        return scipy.sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                       shape=(P, self.bins ** self.dim))

    def _averages(self, y2):
        return (self.W.T @ y2) * self._inv[:, None]

    def project(self, targets) -> np.ndarray:
        y = np.asarray(targets, dtype=float)
        y2 = y.reshape(y.shape[0], -1)
        return (self.W @ self._averages(y2)).reshape(y.shape)

    def fit(self, targets) -> KernelFit:
        y = np.asarray(targets, dtype=float)
        y2 = y.reshape(y.shape[0], -1)
        avg = self._averages(y2)
        fitted = self.W @ avg
        dof = max(y2.shape[0] - self.trace, 1.0)
        resid_std = np.sqrt(np.sum((y2 - fitted) ** 2, axis=0) / dof)
        return KernelFit(self, avg, fitted, self.leverage, resid_std)
