"""Hybrid V2V/V2I channel model: layered GSCM simulator."""

from .config import SimConfig, load_config, load_config_file
from .scenarios import ScenarioParams, builtin_scenarios

__version__ = "0.1.0"

__all__ = ["SimConfig", "load_config", "load_config_file", "ScenarioParams", "builtin_scenarios"]
