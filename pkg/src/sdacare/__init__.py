"""Low-rank doubling solvers for large continuous-time algebraic Riccati equations."""
from .care_core import (CareProblem, ShiftedOperator, apply_a_tilde,
                        apply_a_tilde_power, build_shifted_operator,
                        fold_weight, sda_seed, validate_problem)
from .dsda_t import LowRankGram, RunRecord, SolverConfig, solve
from .diagnostics import residual_dual_lowrank, residual_lowrank

__all__ = [
    "CareProblem", "ShiftedOperator", "apply_a_tilde", "apply_a_tilde_power",
    "build_shifted_operator", "fold_weight", "sda_seed", "validate_problem",
    "LowRankGram", "RunRecord", "SolverConfig", "solve",
    "residual_lowrank", "residual_dual_lowrank",
]
__version__ = "0.1.0"
