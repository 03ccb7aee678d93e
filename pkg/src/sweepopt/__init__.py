"""Discrete optimal control of state-constrained sweeping processes with memory.

The package splits along the natural seams of the problem: ``geometry``
(moving sets and normal cones), ``dynamics`` (catching-up integration,
reconstruction, a-priori bounds), ``transcribe`` (mesh transcription and
solving), ``optimality`` (discrete and continuous stationarity
certificates), ``circuits`` (the closed-form RLC benchmark family) and
``cli`` (artifact plumbing).
"""

from . import circuits, cli, dynamics, geometry, optimality, transcribe
from .dynamics import (
    Controls,
    Mesh,
    ProblemSpec,
    ReferenceArc,
    Trajectory,
    reconstruct_discrete_feasible,
    simulate,
    w12_distance,
)
from .geometry import MovingSet, affine_set, orthant_set, project, smooth_set
from .optimality import (
    assemble_discrete_certificate,
    benchmark_certificate,
    coderivative_check,
    compute_eta,
    verify_continuous_certificate,
)
from .transcribe import SolveOptions, SolveReport, build, convergence_study, solve

__version__ = "0.1.0"

__all__ = [
    "circuits",
    "cli",
    "dynamics",
    "geometry",
    "optimality",
    "transcribe",
    "Controls",
    "Mesh",
    "MovingSet",
    "ProblemSpec",
    "ReferenceArc",
    "SolveOptions",
    "SolveReport",
    "Trajectory",
    "affine_set",
    "assemble_discrete_certificate",
    "benchmark_certificate",
    "build",
    "coderivative_check",
    "compute_eta",
    "convergence_study",
    "orthant_set",
    "project",
    "reconstruct_discrete_feasible",
    "simulate",
    "smooth_set",
    "solve",
    "verify_continuous_certificate",
    "w12_distance",
]
