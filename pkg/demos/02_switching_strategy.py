"""Reading an optimal switching strategy off the reflected solution.

Rewards oscillate in time so that each of three modes is the best one for
part of the horizon.  The solver value is compared with the Bellman
recursion, and the extracted strategy is re-priced as a switched equation.
"""

from _common import problem
from oblique_rbsde.penalization import Numerics, solve_rbsde
from oblique_rbsde.switching import certify_optimal_strategy, verify_representation

p, _, _ = problem("three_mode_oscillating")
num = Numerics(steps=2000)
sol = solve_rbsde(p, num, slack_tol=2e-2)
print(f"certified at m = {sol.m:g}, slack {sol.slack_sup:.2e}")

for i in range(p.n):
    dp = verify_representation(p, sol, i, num, verification="dp")
    ex = certify_optimal_strategy(p, sol, i, num)
    print(f"mode {i}: Y(0) = {dp.rbsde_value:.4f}  DP = {dp.oracle_min:.4f}  U*(0) = {ex.value:.4f}")
    print(f"        strategy {ex.strategy.digest()}")

enum = verify_representation(p, sol, 0, num, verification="enumerate")
best = sorted(enum.table, key=lambda r: r[1])[:3]
print(f"{len(enum.table)} strategies with at most two switches on a 20-node grid; cheapest:")
for digest, u, _ in best:
    print(f"  {u:.4f}  {digest}")
