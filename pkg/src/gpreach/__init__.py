"""Finite-sample GP reachability tubes and sampling-based robust MPC."""

from .certificates import (
    CertificateReport,
    SmallBallEstimate,
    certify,
    confidence_scaling,
    estimate_small_ball_exponent,
    rate_envelope,
    required_samples,
    required_samples_vector,
    shift_cost_bounded,
    shift_cost_subgaussian,
)
from .gp import Dataset, GpPosterior, RkhsFunction, multi_output_posteriors
from .kernels import Kernel, Matern, SquaredExponential
from .mpc import (
    OcpConfig,
    OcpSolution,
    RunLog,
    SampleSet,
    average_cost,
    receding_horizon,
    solve_ocp,
    update_sample_set,
)
from .plants import KnownModel, TruePlant, car_model, fit_rkhs_ground_truth, pendulum_model
from .qp import QpSolution, solve_qp
from .reachability import (
    LipschitzConfig,
    Metric,
    ReachTube,
    UncertaintyBudget,
    baseline_sequential_tube,
    build_tube,
    tightenings,
    tube_radii,
)
from .sampling import (
    RngStream,
    SampledDynamics,
    draw_samples,
    rollout_sample,
    sample_function_on_grid,
)
from .terminal import TerminalIngredients, synthesize_terminal

__all__ = [
    "CertificateReport",
    "Dataset",
    "GpPosterior",
    "Kernel",
    "KnownModel",
    "LipschitzConfig",
    "Matern",
    "Metric",
    "OcpConfig",
    "OcpSolution",
    "QpSolution",
    "ReachTube",
    "RkhsFunction",
    "RngStream",
    "RunLog",
    "SampleSet",
    "SampledDynamics",
    "SmallBallEstimate",
    "SquaredExponential",
    "TerminalIngredients",
    "TruePlant",
    "UncertaintyBudget",
    "average_cost",
    "baseline_sequential_tube",
    "build_tube",
    "car_model",
    "certify",
    "confidence_scaling",
    "draw_samples",
    "estimate_small_ball_exponent",
    "fit_rkhs_ground_truth",
    "multi_output_posteriors",
    "pendulum_model",
    "rate_envelope",
    "receding_horizon",
    "required_samples",
    "required_samples_vector",
    "rollout_sample",
    "sample_function_on_grid",
    "shift_cost_bounded",
    "shift_cost_subgaussian",
    "solve_ocp",
    "solve_qp",
    "synthesize_terminal",
    "tightenings",
    "tube_radii",
    "update_sample_set",
]

__version__ = "0.1.0"
