"""Adaptive a posteriori controlled computation of finite-time blow-up.

Sub-modules
-----------
ode        conditional a posteriori bounds for ``u' = f(u)``
mesh       quadrilateral forest with hanging nodes
dg         interior-penalty dG space, forms and projections
imex       first-order IMEX time stepping
estimator  space-time error indicators and the conditional bound
adaptive   the adaptive space-time driver and blow-up diagnostics
cli        command line entry point
"""

from .adaptive import (AdaptConfig, RunOutput, algorithm3_run, blowup_rate_sequence,
                       diagnose, extrapolate_tstar, fit_norm_growth)
from .dg import DgField, DgSpace, ProblemData, assemble_forms, l2_project_function
from .errors import (BlowupError, ConfigError, DegenerateFit, ImplicitNoRoot, NoDelta,
                     NumericalOverflow, SolverFailure)
from .estimator import solve_delta_pde
from .imex import ImexStepper, compute_A
from .mesh import MeshForest
from .ode import (PolynomialOde, Scheme, Termination, fit_rate, rate_ladder,
                  run_algorithm1, run_algorithm2)
from .problems import build_problem, manufactured

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "RunOutput", "algorithm3_run", "blowup_rate_sequence", "diagnose",
    "extrapolate_tstar", "fit_norm_growth", "DgField", "DgSpace", "ProblemData",
    "assemble_forms", "l2_project_function", "BlowupError", "ConfigError", "DegenerateFit",
    "ImplicitNoRoot", "NoDelta", "NumericalOverflow", "SolverFailure", "solve_delta_pde",
    "ImexStepper", "compute_A", "MeshForest", "PolynomialOde", "Scheme", "Termination",
    "fit_rate", "rate_ladder", "run_algorithm1", "run_algorithm2", "build_problem",
    "manufactured",
]
