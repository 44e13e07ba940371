"""Problem instances shared by the test modules."""

import numpy as np

from oblique_rbsde.model import (CostMatrix, GeneratorSpec, Markovian, RbsdeProblem, TerminalCondition, affine_h,
                                 quadratic_f, zero_f)
from oblique_rbsde.risk import RiskProblem


def constant_problem(intercepts, k, xi, gamma=3.0, slope=None):
    n = len(intercepts)
    gen = GeneratorSpec(n=n, gamma=gamma, h=affine_h(intercepts, slope), f=zero_f)
    return RbsdeProblem(1.0, n, 1, CostMatrix(k), gen, TerminalCondition.constant(xi))


def two_mode():
    """h = (0, 1), k = 0.5, xi = 0: mode 1 pays to reach mode 0 once T - t > 1/2."""
    return constant_problem([0.0, 1.0], [[0.0, 0.5], [0.5, 0.0]], [0.0, 0.0])


def two_mode_penalized(m, s):
    """Closed form of the penalised two-mode values at time-to-go ``s``."""
    s = np.asarray(s, dtype=float)
    y1 = np.where(s <= 0.5, s, 0.5 + (1.0 - np.exp(-m * (s - 0.5))) / m)
    return np.zeros_like(s), y1


def three_mode():
    """h = (0, 1, 2), all switching costs 0.3, xi = 0."""
    k = np.full((3, 3), 0.3)
    np.fill_diagonal(k, 0.0)
    return constant_problem([0.0, 1.0, 2.0], k, [0.0, 0.0, 0.0])


def three_mode_slack(m):
    """Closed-form constraint slack of :func:`three_mode`: mode 2 leaves the
    domain at time-to-go 0.15 and relaxes towards ``0.3`` at rate ``m``."""
    return 2.0 * (1.0 - np.exp(-0.85 * m)) / m


def three_mode_oscillating():
    """Time-dependent running rewards that make every mode optimal somewhere."""
    a = np.array([1.0, 0.5, 0.8])
    c = np.array([1.5, 1.0, 1.2])
    ph = np.array([0.0, 2.1, 4.2])

    def h(t, y, path=None):
        return a + c * np.sin(2 * np.pi * t + ph) - 0.5 * np.asarray(y)

    gen = GeneratorSpec(n=3, gamma=3.5, h=h, f=zero_f)
    k = np.array([[0.0, 0.15, 0.25], [0.2, 0.0, 0.15], [0.25, 0.2, 0.0]])
    return RbsdeProblem(1.0, 3, 1, CostMatrix(k), gen, TerminalCondition.constant([0.0, 0.1, 0.05]))


def coupled_two_mode(weight=0.1):
    """h_1 = weight * y_2, h_2 = 1, k = 0.5, xi = 0."""
    gen = GeneratorSpec(n=2, gamma=1.0, h=affine_h([0.0, 1.0], matrix=[[0.0, weight], [0.0, 0.0]]), f=zero_f,
                        coupling="coupled")
    return RbsdeProblem(1.0, 2, 1, CostMatrix([[0.0, 0.5], [0.5, 0.0]]), gen, TerminalCondition.constant([0.0, 0.0]))


def brownian_sigma(t, path):
    return np.ones((1, 1, 1))


def stochastic_two_mode():
    """Lipschitz driver on X = W with state-dependent running rewards."""

    def h(t, y, path):
        x = path[:, -1, 0]
        return np.stack([0.5 * np.tanh(x), 0.2 + 0.3 * np.cos(x)], -1) - 0.2 * np.asarray(y)

    def xi(path):
        x = path[:, -1, 0]
        return np.stack([0.1 * np.sin(x), 0.1 * np.cos(x)], -1)

    gen = GeneratorSpec(n=2, gamma=1.0, h=h, f=zero_f)
    return RbsdeProblem(1.0, 2, 1, CostMatrix([[0.0, 0.3], [0.3, 0.0]]), gen, TerminalCondition(xi, 0.1),
                        Markovian([0.0], brownian_sigma))


def quadratic_sine():
    """n = 1, f = |z|^2 / 2, xi = sin(W_T)."""
    gen = GeneratorSpec(1, 1.0, affine_h([0.0]), quadratic_f(1.0))
    term = TerminalCondition(lambda path: np.sin(path[:, -1, :]), 1.0)
    return RbsdeProblem(1.0, 1, 1, CostMatrix([[0.0]]), gen, term, Markovian([0.0], brownian_sigma))


def quadratic_sine_oracle(points=80):
    x, w = np.polynomial.hermite_e.hermegauss(points)
    return float(np.log(np.sum(w * np.exp(np.sin(x))) / np.sqrt(2 * np.pi)))


RISK_B = np.array([[0.3], [-0.2]])


def risk_mc():
    def b(t, path):
        return np.broadcast_to(RISK_B, (path.shape[0], 2, 1))

    def l(t, path):
        x = path[:, -1, 0]
        return np.stack([0.5 * np.tanh(x), 0.2 + 0.3 * np.cos(x)], -1)

    def xi(path):
        x = path[:, -1, 0]
        return np.stack([0.1 * np.sin(x), 0.1 * np.cos(x)], -1)

    return RiskProblem(sigma=brownian_sigma, b=b, l=l, x0=[0.0], cost=[[0.0, 0.3], [0.3, 0.0]], xi=xi,
                       horizon=1.0, n=2, d=1, b_bound=0.3, l_bound=0.5, xi_bound=0.1, lipschitz=1.0)


def risk_mc_dp_oracle(steps=100, grid_points=4001, nodes=40):
    """Bellman recursion for ``log J`` on a state grid with Gauss-Hermite increments.

    Works with ``u = exp(Y)``: a step in mode ``i`` is the expectation of
    ``u_i`` under the drifted increment times ``exp(l_i dt)``, followed by the
    switching cap ``Y_i <= Y_j + k_ij``.
    """
    qx, qw = np.polynomial.hermite_e.hermegauss(nodes)
    qw = qw / qw.sum()
    X = np.linspace(-10.0, 10.0, grid_points)
    K = np.array([[0.0, 0.3], [0.3, 0.0]])
    dt = 1.0 / steps
    Y = np.stack([0.1 * np.sin(X), 0.1 * np.cos(X)])
    for _ in range(steps):
        l = np.stack([0.5 * np.tanh(X), 0.2 + 0.3 * np.cos(X)])
        cont = np.empty_like(Y)
        for i in range(2):
            u = np.exp(Y[i])
            nxt = sum(w * np.interp(X + RISK_B[i, 0] * dt + np.sqrt(dt) * q, X, u) for q, w in zip(qx, qw))
            cont[i] = np.log(nxt) + l[i] * dt
        Y = np.minimum(cont, np.min(cont[None, :, :] + K[:, :, None], axis=1))
    return np.array([np.interp(0.0, X, Y[i]) for i in range(2)])


def risk_deterministic():
    """b = 0, time-dependent running costs, constant terminal costs."""

    def l(t, path=None):
        return np.array([0.1 + 0.8 * np.sin(2 * np.pi * t), 0.3 - 0.5 * np.cos(2 * np.pi * t)])

    def xi(path=None):
        return np.array([0.0, 0.1])

    def b(t, path=None):
        return np.zeros((2, 1))

    return RiskProblem(sigma=brownian_sigma, b=b, l=l, x0=[0.0], cost=[[0.0, 0.2], [0.25, 0.0]], xi=xi,
                       horizon=1.0, n=2, d=1, b_bound=0.0, l_bound=0.9, xi_bound=0.1, deterministic=True)
