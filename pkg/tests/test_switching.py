import math
from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instances import stochastic_two_mode, three_mode_oscillating, two_mode
from oblique_rbsde.detgrid import dp_switching_value, solve_switched_ode
from oblique_rbsde.model import TimeGrid
from oblique_rbsde.penalization import Numerics, solve_penalized_bsde
from oblique_rbsde.switching import (AdmissibilityError, ChatteringError, EnumerationCapError, StrategyPaths,
                                     SwitchingStrategy, certify_optimal_strategy, cost_process,
                                     enumerate_strategies, extract_optimal_strategy, solve_switched_bsde,
                                     switched_values, verify_representation)

DET = Numerics(steps=2000)


@pytest.fixture(scope="module")
def osc_solution():
    return solve_penalized_bsde(three_mode_oscillating(), 256.0, DET)


def test_strategy_arrays_and_digest():
    a = SwitchingStrategy(1, ((2, 0), (5, 2)))
    np.testing.assert_array_equal(a.modes_on_steps(7), [1, 1, 0, 0, 0, 2, 2])
    k = np.array([[0, 0.2, 0.4], [0.3, 0, 0.2], [0.25, 0.35, 0]])
    np.testing.assert_allclose(a.cost_on_nodes(k, 7), [0, 0, 0.3, 0.3, 0.3, 0.7, 0.7, 0.7])
    assert a.digest() == "1@t0 -> 0@t2 -> 2@t5 -> T"
    assert a.N == 3 and a.terminal_mode == 2
    assert a.refine(3).switches == ((6, 0), (15, 2))
    np.testing.assert_allclose(cost_process(a, k, TimeGrid(0, 1, 7)), a.cost_on_nodes(k, 7))


@pytest.mark.parametrize("switches, msg", [
    (((3, 0), (1, 1)), "non-decreasing"),
    (((7, 0),), "precede T"),
    (((2, 1),), "keeps mode"),
    (((2, 5),), "out of range"),
])
def test_inadmissible_strategies(switches, msg):
    with pytest.raises(AdmissibilityError, match=msg):
        SwitchingStrategy(1, switches).check_admissible(7, 3)


def test_enumeration_counts_and_cap():
    for n, steps, smax in [(2, 19, 2), (3, 19, 2), (3, 5, 3)]:
        got = enumerate_strategies(steps, n, 0, smax)
        expected = sum(math.comb(steps, s) * (n - 1) ** s for s in range(smax + 1))
        assert len(got) == expected == len({a.digest() for a in got})
        for a in got:
            a.check_admissible(steps, n)
    with pytest.raises(EnumerationCapError):
        enumerate_strategies(200, 3, 0, 3, cap=1000)


def test_extraction_on_two_mode():
    sol = solve_penalized_bsde(two_mode(), 256.0, DET)
    a = extract_optimal_strategy(sol, two_mode().cost, 1)
    assert a.digest() == "1@t0 -> 0@t0 -> T"
    res = certify_optimal_strategy(two_mode(), sol, 1, DET)
    assert abs(res.gap) <= 1e-3 and res.max_switches == 1
    assert extract_optimal_strategy(sol, two_mode().cost, 0).switches == ()


def test_chattering_cap():
    sol = solve_penalized_bsde(two_mode(), 256.0, DET)
    with pytest.raises(ChatteringError) as err:
        extract_optimal_strategy(sol, two_mode().cost, 1, max_switches=0)
    assert err.value.count == 1


def test_extraction_is_optimal_on_oscillating_instance(osc_solution):
    p = three_mode_oscillating()
    sol = osc_solution
    for i in range(3):
        res = certify_optimal_strategy(p, sol, i, DET)
        assert abs(res.gap) <= 1e-3
        assert res.max_switches <= 50


@lru_cache(maxsize=None)
def osc_dp():
    return dp_switching_value(three_mode_oscillating(), TimeGrid(0.0, 1.0, 1000))[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2), st.integers(0, 38), st.integers(1, 2))
def test_switch_and_return_never_beats_dp(start, node, target):
    p = three_mode_oscillating()
    g = TimeGrid(0.0, 1.0, 40)
    other = (start + target) % 3
    stay = SwitchingStrategy(start)
    detour = SwitchingStrategy(start, ((node, other), (node + 1, start)))
    u_stay = solve_switched_ode(p, stay, g, refine=25)
    u_detour = solve_switched_ode(p, detour, g, refine=25)
    assert u_detour >= osc_dp()[start] - 1e-9
    # one step in the other mode cannot recoup more than the round-trip cost plus that step's rewards
    assert u_detour - u_stay >= p.cost.k[start, other] + p.cost.k[other, start] - 2 * 3.5 * 3 / 40


def test_representation_dp_and_enumerate(osc_solution):
    p = three_mode_oscillating()
    sol = osc_solution
    for i in range(3):
        rep = verify_representation(p, sol, i, DET, verification="dp")
        assert abs(rep.gap) <= 1e-3
        enum = verify_representation(p, sol, i, DET, verification="enumerate")
        assert enum.lower_bound_ok and len(enum.table) == 1 + 19 * 2 + 171 * 4
        assert enum.gap <= 1e-3
    with pytest.raises(ValueError):
        verify_representation(p, sol, 0, DET, verification="bogus")


def test_per_path_strategy_matches_batched_value():
    p = stochastic_two_mode()
    num = Numerics(num_paths=2000, steps=20, seed=0)
    sol = solve_penalized_bsde(p, 8.0, num)
    a = SwitchingStrategy(1, ((4, 0),))
    P = num.num_paths
    paths = StrategyPaths(modes=np.tile(a.modes_on_steps(20), (P, 1)),
                          costs=np.tile(a.cost_on_nodes(p.cost, 20), (P, 1)),
                          counts=np.ones(P, dtype=int), switch_log=(((4, 0),),) * P, start_mode=1)
    per_path = solve_switched_bsde(p, paths, num, states=sol.states)
    batched = solve_switched_bsde(p, a, num, states=sol.states)
    assert per_path.value == pytest.approx(batched.value, abs=1e-10)
    assert per_path.se == pytest.approx(batched.se, rel=1e-6)
    assert paths.path(3) == a


def test_switched_values_need_diagonal_generator():
    from instances import coupled_two_mode
    with pytest.raises(ValueError):
        switched_values(coupled_two_mode(), [SwitchingStrategy(0)], Numerics(steps=10))


def test_stochastic_lower_bound_small():
    p = stochastic_two_mode()
    num = Numerics(num_paths=3000, steps=19, seed=1, m_start=32)
    sol = solve_penalized_bsde(p, 64.0, num)
    rep = verify_representation(p, sol, 1, num, verification="enumerate")
    assert rep.lower_bound_ok
    assert rep.gap <= rep.tolerance
    ex = certify_optimal_strategy(p, sol, 1, num)
    assert isinstance(ex.strategy, StrategyPaths)
    assert abs(ex.gap) <= 3 * ex.se + 0.02
