"""Time-varying coefficient models for search-engine advertising response."""

from .spline_basis import BasisSpec, basis_matrix, basis_row, place_knots, truncated_power
from .mixed_model import (
    FittedMixedModel,
    PenalizedDesign,
    fit_metrics,
    fit_penalized_fixed_lambda,
    fit_reml,
)
from .tvc import FittedTvcModel, ModelPanel, Trajectory, build_design, fit, standardize
from .sea_model import (
    ModelSpec,
    PrepConfig,
    compare_specs,
    prepare_panel,
    recover_structural,
    stage1_budget,
    stage2_response,
    standard_specs,
)
from .simulator import SimConfig, generate, ground_truth_eval

__version__ = "0.1.0"
