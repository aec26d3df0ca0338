"""Ferroelectric polarization solver.

Material-point constitutive updates with switching and saturation enforced by
Lagrange multipliers and an active-set strategy, a load-program driver with a
closed-form uniaxial oracle, and a small hexahedral finite-element layer for
structural benchmarks.
"""

from .material import InternalState, MaterialParams, params_from_file, preset
from .vi_solver import IncrementResult, PointControls, SolverSettings, solve_increment
from .driver import LoadProgram, Segment, TraceStep, build_scenario, oracle_1d, run_program

__all__ = [
    "InternalState",
    "MaterialParams",
    "params_from_file",
    "preset",
    "IncrementResult",
    "PointControls",
    "SolverSettings",
    "solve_increment",
    "LoadProgram",
    "Segment",
    "TraceStep",
    "build_scenario",
    "oracle_1d",
    "run_program",
]
