"""
vidsem — two-stage video prediction: forecast frozen semantic features, then
denoise future latents conditioned on them.
"""

from .config import ExperimentConfig
from .exceptions import (
    ArgumentError,
    CacheInvalidError,
    ConfigError,
    DependencyError,
    FingerprintMismatchError,
    FitError,
    NumericalError,
    ShapeError,
    VidsemError,
)
from .ledger import RunLedger
from .pipeline import Pipeline, PipelineResult

__version__ = "0.1.0"
__description__ = "Hierarchical semantics-guided video prediction at desk scale"

__all__ = [
    "ExperimentConfig",
    "Pipeline",
    "PipelineResult",
    "RunLedger",
    "VidsemError",
    "ConfigError",
    "ArgumentError",
    "ShapeError",
    "FitError",
    "CacheInvalidError",
    "DependencyError",
    "FingerprintMismatchError",
    "NumericalError",
]
