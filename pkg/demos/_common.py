from pathlib import Path

from oblique_rbsde.problem_io import load_problem

PROBLEMS = Path(__file__).parent / "problems"


def problem(name):
    return load_problem(PROBLEMS / f"{name}.json")
