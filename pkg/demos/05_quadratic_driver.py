"""A single quadratic equation with a closed-form value.

With f = |z|^2 / 2 and terminal value sin(W_1) the exponential transform
gives Y(0) = log E[exp(sin(G))], G standard normal.  Regression Monte Carlo
is compared with Gauss-Hermite quadrature for growing path counts.
"""

import numpy as np

from _common import problem
from oblique_rbsde.penalization import Numerics, solve_penalized_bsde

p, _, _ = problem("quadratic_sine")
x, w = np.polynomial.hermite_e.hermegauss(80)
ref = np.log(np.sum(w * np.exp(np.sin(x))) / np.sqrt(2 * np.pi))
print(f"quadrature value {ref:.5f}")
for paths in (2_000, 10_000, 50_000):
    sol = solve_penalized_bsde(p, 1.0, Numerics(num_paths=paths, steps=50, seed=0))
    err = (sol.y0_raw[0] - ref) / ref
    print(f"{paths:6d} paths: Y(0) = {sol.y0_raw[0]:.5f} +- {sol.y0_se[0]:.5f}  relative error {err:+.2%}")
