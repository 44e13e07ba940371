"""Penalisation and regression Monte Carlo solvers for obliquely reflected
systems of diagonally quadratic BSDEs, with optimal-switching verification."""

__version__ = "0.1.0"

from .model import (CostMatrix, Deterministic, GeneratorSpec, Markovian, ProblemValidationError, RbsdeProblem,
                    TerminalCondition, TimeGrid, affine_h, check_domain_membership, check_generator,
                    oblique_projection, project_to_domain, quadratic_f, validate_cost_matrix, zero_f)
from .penalization import (ConvergenceError, DiscreteSolution, Numerics, penalized_driver, penalty_sweep,
                           solve_penalized_bsde, solve_rbsde)
from .switching import (SwitchingStrategy, certify_optimal_strategy, cost_process, enumerate_strategies,
                        extract_optimal_strategy, solve_switched_bsde, verify_representation)
from .coupled import FixedPointTrace, solve_coupled_rbsde
from .risk import RiskProblem, build_risk_generator, estimate_cost, verify_risk_optimality
