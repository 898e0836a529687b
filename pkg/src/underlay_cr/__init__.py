"""Underlay cognitive-radio resource allocation with stochastic dual tracking."""

from .config import ConfigError, ScenarioConfig, load_config, reference_defaults
from .model import pu_rate, su_rate

__all__ = ["ConfigError", "ScenarioConfig", "load_config", "reference_defaults", "pu_rate", "su_rate"]
__version__ = "0.1.0"
