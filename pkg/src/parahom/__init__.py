"""Numerical periodic homogenization of parabolic equations with oscillations in space and time."""

from .cell import solve_cell, solve_correctors, tau_scheme
from .effective import (
    EffectiveTensor,
    adjoint_check,
    build_flux_correctors,
    build_flux_mismatch,
    effective_tensor,
    effective_tensor_field,
)
from .errors import *  # noqa: F401,F403
from .fields import CoefficientSpec, FourVarGridFn, MacroGrid, MacroGridFn, TorusGridFn, mixed_norm
from .smoothing import K_eps, cutoff, smooth, verify_scaling
from .solvers import ProblemData, solve_dual, solve_fine, solve_homogenized
from .study import StudyConfig, build_w_eps, error_report, fit_rate, run_study

__version__ = "0.1.0"
