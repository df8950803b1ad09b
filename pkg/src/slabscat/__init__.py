"""Finite-element scattering, adjoint sensitivities and guided modes for periodic slabs."""

from .harmonics import BlochContext, classify_orders, dtn_multipliers
from .modes import ModeProblem, check_nonresonance, compute_modes, omega_j
from .scatter import Incidence, solve, solve_scattering, sweep
from .sensitivity import fd_check, gradient_energy, gradient_order, solve_adjoint, solve_linearized
from .structure import AdmissibleEnvelope, CellGeometry, CoefficientField, Disk, Inclusion, Rect, rasterize

__version__ = "0.1.0"

__all__ = [
    "AdmissibleEnvelope",
    "BlochContext",
    "CellGeometry",
    "CoefficientField",
    "Disk",
    "Incidence",
    "Inclusion",
    "ModeProblem",
    "Rect",
    "check_nonresonance",
    "classify_orders",
    "compute_modes",
    "dtn_multipliers",
    "fd_check",
    "gradient_energy",
    "gradient_order",
    "omega_j",
    "rasterize",
    "solve",
    "solve_adjoint",
    "solve_linearized",
    "solve_scattering",
    "sweep",
]
