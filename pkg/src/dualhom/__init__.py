"""Numerical homogenization of two-scale dual-continuum diffusion with strong exchange."""

__version__ = "0.1.0"

from .coeffs import Box, ProblemData, load_problem, validate
from .cell import UnitCellGrid, solve_cell_problems, solve_corrector_N, solve_exchange_M
from .effective import EffectiveField, EffectivePointData, build_effective_field, effective_point
from .macrosolve import MacroMesh, TimeGrid, solve_homogenized
from .finesolve import FineRunSpec, solve_fine
from .verify import StudyConfig, build_corrector_gradient, error_norms, fit_rate, run_study

__all__ = [
    "__version__",
    "Box",
    "ProblemData",
    "load_problem",
    "validate",
    "UnitCellGrid",
    "solve_cell_problems",
    "solve_corrector_N",
    "solve_exchange_M",
    "EffectiveField",
    "EffectivePointData",
    "build_effective_field",
    "effective_point",
    "MacroMesh",
    "TimeGrid",
    "solve_homogenized",
    "FineRunSpec",
    "solve_fine",
    "StudyConfig",
    "build_corrector_gradient",
    "error_norms",
    "fit_rate",
    "run_study",
]
