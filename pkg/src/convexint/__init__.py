"""Convex integration for the continuity-defect equation on the torus."""

from .blocks import Gate, SchemeParams, integrate_trajectory, make_base_blocks, period_function
from .fields import PeriodicField, TimeSeriesField, lp_norm, sobolev_norm
from .geometry import XiBasis, make_xi_basis
from .ledger import feasible_parameters, sweep, verify_exponent_inequalities
from .perturb import (GateError, StepConfig, StepError, StepReport, Triple, admissibility_check,
                      decompose_error, initial_triple, iterate, perturbation_step, shear_triple)

__version__ = "0.1.0"

__all__ = [
    "Gate", "GateError", "PeriodicField", "SchemeParams", "StepConfig", "StepError", "StepReport",
    "TimeSeriesField", "Triple", "XiBasis", "admissibility_check", "decompose_error",
    "feasible_parameters", "initial_triple", "integrate_trajectory", "iterate", "lp_norm",
    "make_base_blocks", "make_xi_basis", "period_function", "perturbation_step", "shear_triple",
    "sobolev_norm", "sweep", "verify_exponent_inequalities",
]
