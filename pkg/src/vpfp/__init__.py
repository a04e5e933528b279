"""Certified hypocoercive decay for the linearized Vlasov-Poisson-Fokker-Planck system."""

from .discretization import HermiteBasis, OperatorSet, PhaseState, build_operators, fourth_moment_form
from .potential import PotentialSpec, check_confinement_assumptions, eval_potential
from .rates import (
    ChainConstants,
    EpsScaling,
    HypocoConstants,
    compute_decay_rate,
    compute_delta_star,
    compute_eps_scaled,
)
from .steady_state import Grid1D, MacroField, SteadyState, poisson_solve_1d, solve_poisson_boltzmann

__version__ = "0.1.0"

__all__ = [
    "Grid1D",
    "MacroField",
    "SteadyState",
    "PotentialSpec",
    "HermiteBasis",
    "OperatorSet",
    "PhaseState",
    "HypocoConstants",
    "EpsScaling",
    "ChainConstants",
    "eval_potential",
    "check_confinement_assumptions",
    "poisson_solve_1d",
    "solve_poisson_boltzmann",
    "build_operators",
    "fourth_moment_form",
    "compute_delta_star",
    "compute_decay_rate",
    "compute_eps_scaled",
    "__version__",
]
