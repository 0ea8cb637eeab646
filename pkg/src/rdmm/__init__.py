"""Region-specific diffeomorphic metric mapping (RDMM) with LDDMM as a special case."""

from .config import OptimizerSettings, RegistrationConfig, default_config
from .dynamics import (
    GeodesicState,
    IntegratorConfig,
    current_weights,
    energy,
    epdiff_rhs,
    integrate_geodesic,
    rdmm_rhs,
    source_term,
)
from .estimator import RDMMRegistration, check_image_pair, check_preweights
from .exceptions import (
    FormatError,
    GenerationError,
    IntegrationBlowupError,
    InvalidParameterError,
    NumericalError,
    RDMMError,
    ShapeMismatchError,
)
from .fields import (
    GridSpec,
    compose_map,
    identity_map,
    interpolate,
    jacobian_determinant,
    resample,
)
from .kernels import MultiGaussianKernel, kernel_apply, local_std_map, preweights_to_weights
from .metrics import dice, dice_per_label, fold_measure
from .objectives import (
    RegPenaltyConfig,
    SimilarityConfig,
    decay_weights,
    mk_lncc,
    omt_penalty,
    range_penalty,
    shooting_objective,
)
from .optimizer import RegistrationResult, gradient_check, objective_gradient, optimize
from .synthdata import SceneParams, ScenePair, ShapeSpec, generate_pair, region_preweights

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "GenerationError",
    "GeodesicState",
    "GridSpec",
    "IntegrationBlowupError",
    "IntegratorConfig",
    "InvalidParameterError",
    "MultiGaussianKernel",
    "NumericalError",
    "OptimizerSettings",
    "RDMMError",
    "RDMMRegistration",
    "RegPenaltyConfig",
    "RegistrationConfig",
    "RegistrationResult",
    "SceneParams",
    "ScenePair",
    "ShapeMismatchError",
    "ShapeSpec",
    "SimilarityConfig",
    "check_image_pair",
    "check_preweights",
    "compose_map",
    "current_weights",
    "decay_weights",
    "default_config",
    "dice",
    "dice_per_label",
    "energy",
    "epdiff_rhs",
    "fold_measure",
    "generate_pair",
    "gradient_check",
    "identity_map",
    "integrate_geodesic",
    "interpolate",
    "jacobian_determinant",
    "kernel_apply",
    "local_std_map",
    "mk_lncc",
    "objective_gradient",
    "omt_penalty",
    "optimize",
    "preweights_to_weights",
    "range_penalty",
    "rdmm_rhs",
    "region_preweights",
    "resample",
    "shooting_objective",
    "source_term",
]
