"""Cubature Kalman filtering with adaptive fading factors."""

from .adaptive import (
    AdaptiveConfig,
    AdaptiveState,
    SlidingWindow,
    Variant,
    compute_a1,
    compute_a2,
    estimate_q_star,
    estimate_r_star,
    init_session,
    step_afckf,
)
from .cubature import (
    CubatureRule,
    NoiseCovariances,
    NonPsdError,
    SingularError,
    StateEstimate,
    make_cubature_rule,
)
from .models import SystemModel, linear_cv_model, tracking_model
from .simulator import RunConfig, RunReport, monte_carlo

__version__ = "0.1.0"
