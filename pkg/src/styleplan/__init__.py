"""styleplan: personalized driving-style fine-tuning for a compact learned planner.

Pre-train a multi-modal driving policy by imitation on pooled expert data,
then fine-tune it toward an individual user's style with mixed expert/user
batches and a feature-matching style regularizer, optionally refining plans
through a differentiable nonlinear least-squares optimizer.
"""

from .costs import COST_TERMS, CostWeights, ResidualVector, residual_jacobian, residuals
from .errors import (
    DataError,
    FitFailure,
    FrameParseError,
    SolverFailure,
    TrainingFailure,
)
from .features import (
    D_SAFE,
    FEATURE_NAMES,
    FeatureScaling,
    FeatureVector,
    extract_features,
    extract_features_with_grad,
    style_error,
)
from .frames import (
    Frame,
    Neighbor,
    Route,
    TrafficLight,
    constant_velocity_predictions,
    load_frames,
    save_frames,
)
from .kinematics import (
    AgentState,
    ControlSequence,
    KinematicParams,
    Trajectory,
    rollout,
    rollout_jacobians,
    wrap_angle,
)
from .optimizer import SolverConfig, gauss_newton, refine, refine_with_grad

__version__ = "0.1.0"
