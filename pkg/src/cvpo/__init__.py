"""Constrained variational policy optimization on desk-scale CMDPs."""

from .cmdp_core import CmdpSpec, ReplayBuffer, Trajectory, Transition, convert_threshold
from .estep import ParticleSet, dual_value, solve_dual, variational_weights, min_feasible_cost

__all__ = [
    "CmdpSpec",
    "ReplayBuffer",
    "Trajectory",
    "Transition",
    "convert_threshold",
    "ParticleSet",
    "dual_value",
    "solve_dual",
    "variational_weights",
    "min_feasible_cost",
]
__version__ = "0.1.0"
