"""Uncertainty-aware group-level emotion recognition over precomputed features.

The package classifies the collective emotion of a group from per-individual
feature vectors (faces, objects) plus a whole-scene feature. Individuals are
embedded as diagonal Gaussians in latent space; stochastic draws from those
Gaussians drive Monte-Carlo prediction, uncertainty-weighted aggregation,
quality filtering, and a three-branch (face / object / scene) fusion model.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError, ShapeError, UalError

__all__ = [
    "__version__",
    "UalError",
    "ShapeError",
    "DataError",
    "ConfigError",
    "NumericError",
]
