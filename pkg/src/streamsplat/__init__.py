"""Streaming feature-Gaussian reconstruction engine."""

from .core import (
    Camera,
    EngineConfig,
    FeatureGaussian,
    FrameObservation,
    GaussianArrays,
    RigidTransform,
    covariance,
    eval_density,
)

__all__ = [
    "Camera",
    "EngineConfig",
    "FeatureGaussian",
    "FrameObservation",
    "GaussianArrays",
    "RigidTransform",
    "covariance",
    "eval_density",
]

__version__ = "0.1.0"
