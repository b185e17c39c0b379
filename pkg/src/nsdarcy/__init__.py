"""Adaptive finite elements for coupled Navier-Stokes and Darcy flow.

Bernardi-Raugel velocities and piecewise constant pressures in the fluid,
lowest-order Raviart-Thomas velocities in the porous medium, and a
continuous piecewise linear interface pressure on a coarsened interface
partition. A residual estimator drives Dorfler marking and newest vertex
bisection.
"""
from .adaptivity import MarkingConfig, mark, run_adaptive
from .discretization import DiscreteSolution, DofMap, assemble_gauged, build_dof_map
from .estimator import assemble_indicators
from .mesh import Mesh, build_interface_partition, build_structured_mesh, refine, refine_uniform
from .model import ProblemData, make_manufactured, make_problem
from .norms import error_norms
from .reporting import run_uniform_study
from .solver import SolverConfig, solve_stationary

__version__ = "0.1.0"

__all__ = [
    "MarkingConfig", "mark", "run_adaptive", "DiscreteSolution", "DofMap", "assemble_gauged",
    "build_dof_map", "assemble_indicators", "Mesh", "build_interface_partition",
    "build_structured_mesh", "refine", "refine_uniform", "ProblemData", "make_manufactured",
    "make_problem", "error_norms", "run_uniform_study", "SolverConfig", "solve_stationary",
]
