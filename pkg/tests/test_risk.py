import numpy as np
import pytest

from instances import RISK_B, risk_deterministic, risk_mc, risk_mc_dp_oracle
from oblique_rbsde.mc_engine import simulate_brownian
from oblique_rbsde.model import ProblemValidationError, TimeGrid
from oblique_rbsde.penalization import Numerics
from oblique_rbsde.risk import (RiskProblem, build_risk_generator, check_risk_problem, estimate_cost,
                                random_strategies, verify_risk_optimality)
from oblique_rbsde.switching import SwitchingStrategy


def test_bounds_are_mandatory():
    with pytest.raises(ProblemValidationError, match="l_bound"):
        RiskProblem(sigma=None, b=None, l=None, x0=[0.0], cost=[[0, 1], [1, 0]], xi=None, horizon=1.0, n=2,
                    b_bound=0.1, xi_bound=0.1)


def test_generator_pieces():
    rp = risk_mc()
    gen = build_risk_generator(rp)
    assert gen.gamma == pytest.approx(0.8)
    path = np.array([[[0.3]]])
    z = np.array([[[0.2], [-0.4]]])
    y = np.zeros((1, 2))
    out = gen.evaluate(0.0, y, z, path)
    expected = np.asarray(rp.l(0.0, path))[0] + 0.5 * z[0, :, 0] ** 2 + RISK_B[:, 0] * z[0, :, 0]
    np.testing.assert_allclose(out[0], expected)
    assert build_risk_generator(risk_deterministic()).linear_z is None


def test_declared_bounds_are_checked():
    assert check_risk_problem(risk_mc()).passed
    assert check_risk_problem(risk_deterministic()).passed
    rp = risk_mc()
    loose = RiskProblem(**{**rp.__dict__, "l_bound": 0.1})
    rep = check_risk_problem(loose)
    assert not rep.passed and rep.checks["H3"] is False
    steep = RiskProblem(**{**rp.__dict__, "lipschitz": 0.01})
    assert check_risk_problem(steep).checks["H2"] is False


def test_deterministic_cost_is_exact():
    rp = risk_deterministic()
    grid = TimeGrid(0.0, 1.0, 1000)
    # the sine averages to zero over a period on a uniform left-endpoint grid
    assert estimate_cost(rp, SwitchingStrategy(0), grid=grid).log_value == pytest.approx(0.1, abs=1e-12)
    a = SwitchingStrategy(0, ((500, 1),))
    t = grid.nodes[500:1000]
    expected = 0.1 * 0.5 + 0.8 * np.sin(2 * np.pi * grid.nodes[:500]).sum() / 1000 + 0.2 + \
        (0.3 - 0.5 * np.cos(2 * np.pi * t)).sum() / 1000 + 0.1
    assert estimate_cost(rp, a, grid=grid).log_value == pytest.approx(expected, abs=1e-12)


def test_girsanov_and_drift_routes_agree():
    rp = risk_mc()
    paths = simulate_brownian(TimeGrid(0.0, 1.0, 50), 40000, seed=3)
    a = SwitchingStrategy(0, ((20, 1),))
    g = estimate_cost(rp, a, paths, route="girsanov")
    d = estimate_cost(rp, a, paths, route="drift")
    assert abs(g.log_value - d.log_value) <= 4 * np.hypot(g.log_se, d.log_se)
    with pytest.raises(ValueError):
        estimate_cost(rp, a, paths, route="other")


def test_random_strategies_are_admissible_and_seeded():
    a = random_strategies(50, 3, 1, 30, np.random.default_rng(7))
    b = random_strategies(50, 3, 1, 30, np.random.default_rng(7))
    assert [s.digest() for s in a] == [s.digest() for s in b]
    for s in a:
        s.check_admissible(50, 3)
        assert s.start_mode == 1 and len(s.switches) <= 3


def test_deterministic_identity():
    rp = risk_deterministic()
    for mode in (0, 1):
        rep = verify_risk_optimality(rp, Numerics(steps=1000), start_mode=mode, n_random=30)
        assert abs(rep.gap) <= 1e-3
        assert rep.lower_bound_violations == 0
        assert rep.strategies_tested == 1 + 20 + 190 + 30
        assert set(rep.to_json()) == {"Y0", "logJ_star", "se", "gap", "lower_bound_violations",
                                      "strategies_tested"}


def test_monte_carlo_identity_small():
    rp = risk_mc()
    num = Numerics(num_paths=8000, steps=40, seed=1)
    rep = verify_risk_optimality(rp, num, start_mode=1, n_random=20, enum_nodes=8)
    assert abs(rep.gap) <= 3 * rep.se + 5e-3
    assert rep.lower_bound_violations == 0
    oracle = risk_mc_dp_oracle(steps=40, grid_points=1601)
    assert rep.Y0 == pytest.approx(oracle[1], abs=0.02)
