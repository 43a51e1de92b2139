"""Slow-fast sparse decoding with a closed-form KV selector."""

from .core import (
    CacheLimits,
    ScoreDistribution,
    SelectorConfig,
    TriggerConfig,
    default_config,
    normalize,
    validate_distribution,
)
from .errors import SFIError

__version__ = "0.1.0"

__all__ = [
    "CacheLimits",
    "SFIError",
    "ScoreDistribution",
    "SelectorConfig",
    "TriggerConfig",
    "default_config",
    "normalize",
    "validate_distribution",
]
