"""Penalised systems approach the reflected one at rate 1/m.

Three modes with constant rewards (0, 1, 2) and switching cost 0.3.  The
sweep solves the penalised ODE for m = 1 .. 256 on a common grid and prints
how far the values stray outside the constraint domain.
"""

import numpy as np

from _common import problem
from oblique_rbsde.penalization import Numerics, penalty_sweep

p, _, _ = problem("three_mode")
rep = penalty_sweep(p, [2.0 ** j for j in range(9)], Numerics(steps=2000))

print(f"{'m':>6} {'slack':>10} {'m * slack':>10}  Y(0)")
for m, s, y0 in zip(rep.m_values, rep.slack_sup, rep.y0):
    print(f"{m:6.0f} {s:10.3e} {m * s:10.3f}  {np.round(y0, 4)}")
print(f"log-log slope {rep.slope:.3f}, monotonicity violations {rep.violations}, verdict {rep.verdict}")
