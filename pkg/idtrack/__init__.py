"""
idtrack

Multi-target tracking with the classical JPDAF and the influence-diagram
JPDAF: Gaussian influence-diagram algebra, Kalman filtering in both forms,
AR(1) colored-noise augmentation, scenario generation and a Monte Carlo
experiment harness.
"""

from .config import ConfigError, IdtrackError, Tolerances
from .filters import (
    ColoredNoiseSpec,
    IllConditionedError,
    LinearGaussianModel,
    StateEstimate,
    augment_colored,
    id_predict,
    id_update,
    kf_predict,
    kf_update,
)
from .gaussian_id import (
    GaussianID,
    InfluenceDiagramError,
    MomentGaussian,
    cov_to_id,
    enter_evidence,
    id_to_cov,
    quad_form_inverse,
    remove_node,
    reverse_arc,
    stack,
)
from .jpdaf import AssociationConfig, Backend, Track, jpdaf_step

__all__ = [
    "AssociationConfig",
    "Backend",
    "ColoredNoiseSpec",
    "ConfigError",
    "GaussianID",
    "IdtrackError",
    "IllConditionedError",
    "InfluenceDiagramError",
    "LinearGaussianModel",
    "MomentGaussian",
    "StateEstimate",
    "Tolerances",
    "Track",
    "augment_colored",
    "cov_to_id",
    "enter_evidence",
    "id_predict",
    "id_to_cov",
    "id_update",
    "jpdaf_step",
    "kf_predict",
    "kf_update",
    "quad_form_inverse",
    "remove_node",
    "reverse_arc",
    "stack",
]

# Version info
__version__ = "0.1.0"
