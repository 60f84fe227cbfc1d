"""Delta-method uncertainty quantification for MLP classifiers.

Trains a ReLU MLP to its MAP estimate, builds a Laplace covariance over the
last layers' parameters, maps it to a Gaussian over the logits and turns that
into a marginal PMF by Monte Carlo.  Fusion, threshold risk and calibration
tools work on top of those estimates.
"""

from .errors import ConfigError, DeltaUQError, DomainError, NumericError, ParseError, ShapeError, TrainingError
from .nn_core import LayerSpec, ModelParams, forward, mlp_layers, softmax
from .posterior import PosteriorCovariance, compute_covariance, direct_covariance, recursive_covariance
from .prediction import LogitGaussian, PmfEstimate, delta_propagate, mc_marginalize, predict_point
from .fusion import fuse_classifiers, fuse_same_class, risk_assess
from .training import TrainConfig, init_params, train_map

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DeltaUQError",
    "DomainError",
    "LayerSpec",
    "LogitGaussian",
    "ModelParams",
    "NumericError",
    "ParseError",
    "PmfEstimate",
    "PosteriorCovariance",
    "ShapeError",
    "TrainConfig",
    "TrainingError",
    "compute_covariance",
    "delta_propagate",
    "direct_covariance",
    "forward",
    "fuse_classifiers",
    "fuse_same_class",
    "init_params",
    "mc_marginalize",
    "mlp_layers",
    "predict_point",
    "recursive_covariance",
    "risk_assess",
    "softmax",
    "train_map",
]
