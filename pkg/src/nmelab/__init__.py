"""Hessian structure toolkit for small fully connected networks.

Splits the loss Hessian into its Gauss-Newton part and the nonlinear
modelling error, estimates traces of both, and implements training rules
that penalise curvature (gradient penalties, weight noise, trace penalties,
SAM variants).
"""

from .activations import ActivationSpec, activation_eval
from .curvature import (
    CurvatureOperator,
    analytic_second_derivative,
    fisher_check,
    full_matrix,
    gn_trace_sampled,
    gnvp,
    hutchinson_trace,
    nme_scan,
    nmevp,
    ntk,
)
from .nn import Model, load_checkpoint, loss_eval, model_forward, record_forward, save_checkpoint
from .quadratic import QuadraticProblem, evolve, step_doubling_residual
from .regularize import Objective, RegularizerSpec, StepReport
from .tape import DerivativeOverride, NonFiniteError, OverrideRegistry, Tape, hvp, jvp, register_override

__version__ = "0.1.0"
