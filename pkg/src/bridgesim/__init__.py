"""Simulation of diffusion bridges with importance weights.

Linear-Gaussian bridges are sampled exactly (transform of the unconditioned
process) or from the bridge SDE; nonlinear bridges use a guided Euler
proposal with a computable likelihood-ratio weight.  Expectations under the
conditioned law come from self-normalised importance sampling.
"""

from ._backend import BACKEND
from .core import (
    BridgeProblem, CallableCoefficient, CoefficientFn, ConstantCoefficient, GeneralModel,
    LinearModel, Path, PathBatch, TimeGrid, WeightedSample, as_coefficient, make_refined_grid,
    make_uniform_grid,
)
from .errors import (
    BlowupError, BridgeSimError, ConfigError, ControllabilityError, EstimationError,
    EvaluationError, InvalidArgument, NumericError, OracleInsufficient, ParseError,
)
from .estimate import (
    ISResult, ObservationSet, coordinate_at, path_integral, posterior_batch, resample,
    sample_posterior_path, self_normalized_estimate, terminal, weight_diagnostics,
    weighted_estimate,
)
from .expr import ExprCoefficient, evaluate, parse_expr, to_source
from .gaussbridge import (
    GaussianBridgeKit, bridge2d_closed_form, bridge2d_model, bridge_sde_drift, case1_log_weight,
    condition_path, sample_bridge_sde, sample_xi,
)
from .girsanov import (
    case2_bounded_log_weight, case2_bridge_drift, case2_unbounded_log_weight, girsanov_log_weight,
)
from .integrate import NoiseStream, case2_bridge_batch, euler, forward_batch, sample_case2_bridge
from .linalg import check_controllable, covariance_table, fundamental_matrix, left_pinv
from .oracle import (
    brownian_bridge_moments, gaussian_conditioning_oracle, rejection_conditional,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
