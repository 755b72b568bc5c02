"""Multi-task sequence policies with per-task and per-group sparse parameter masks."""

from .config import RunConfig, load_config
from .estimators import MTDT, GHarmoDT, HarmoDT
from .exceptions import (ConfigurationError, DataError, DomainError, HarmoError, RunError,
                         StateError)
from .gating import GatingClassifier

__all__ = ["RunConfig", "load_config", "MTDT", "HarmoDT", "GHarmoDT", "GatingClassifier",
           "HarmoError", "ConfigurationError", "DataError", "DomainError", "RunError", "StateError"]
__version__ = "0.1.0"
