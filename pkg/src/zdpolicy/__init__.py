"""Zero dynamics policies: local construction, learning and tracking.

Set ZDP_DISABLE_NUMBA=1 before import to run the pure-numpy kernels.
"""

from ._jit import NUMBA_ENABLED
from .dynamics import (CartpoleParams, ControlAffineSystem, NormalFormSystem, NzState, annihilation_residual,
                       cartpole_normal_form, cartpole_system, feedback_linearize, linear_normal_form, linear_system,
                       zero_dynamics_rhs)
from .errors import NumericalError, ValidationError, ZdpError
from .linalg import GainMatrix, LinearModel, linearize_about_origin, lqr_gain, place_poles
from .linear_zdp import InvariantSubspace, LinearZdp, build_e_matrix, build_linear_zdp, select_invariant_subspace
from .mlp import MlpParams, NetworkPsi, init_mlp, mlp_forward, mlp_input_jacobian
from .ocp import IlqrConfig, IlqrSolution, OptimalControl, QuadraticCost, ilqr_solve, optimal_control_query
from .learning import TrainConfig, invariance_residual, loss_batch, loss_gradient, pretrain, train
from .runtime import (LinearStateFeedback, RoaGrid, SettleConfig, Trajectory, TrackingController,
                      fit_exponential_envelope, roa_sweep, simulate, tracking_controller)

__version__ = "0.1.0"

__all__ = [
    "NUMBA_ENABLED",
    "CartpoleParams", "ControlAffineSystem", "NormalFormSystem", "NzState", "annihilation_residual",
    "cartpole_normal_form", "cartpole_system", "feedback_linearize", "linear_normal_form", "linear_system",
    "zero_dynamics_rhs",
    "NumericalError", "ValidationError", "ZdpError",
    "GainMatrix", "LinearModel", "linearize_about_origin", "lqr_gain", "place_poles",
    "InvariantSubspace", "LinearZdp", "build_e_matrix", "build_linear_zdp", "select_invariant_subspace",
    "MlpParams", "NetworkPsi", "init_mlp", "mlp_forward", "mlp_input_jacobian",
    "IlqrConfig", "IlqrSolution", "OptimalControl", "QuadraticCost", "ilqr_solve", "optimal_control_query",
    "TrainConfig", "invariance_residual", "loss_batch", "loss_gradient", "pretrain", "train",
    "LinearStateFeedback", "RoaGrid", "SettleConfig", "Trajectory", "TrackingController",
    "fit_exponential_envelope", "roa_sweep", "simulate", "tracking_controller",
]
