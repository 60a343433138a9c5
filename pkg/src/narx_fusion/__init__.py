"""Fuse local linear models into a single sparse polynomial NARX model."""

from .core import (
    ArxModel,
    FeatureDescriptor,
    FusionConfig,
    OperatingPoint,
    PNarxModel,
    Term,
    TimeSeries,
)
from .fusion import fuse, simulate_pnarx, validate

__version__ = "0.1.0"

__all__ = [
    "ArxModel",
    "FeatureDescriptor",
    "FusionConfig",
    "OperatingPoint",
    "PNarxModel",
    "Term",
    "TimeSeries",
    "fuse",
    "simulate_pnarx",
    "validate",
]
