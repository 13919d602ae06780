from .campaign import CampaignFailure, CampaignResult, UnknownView, emit_plot_data, run
from .config import ConfigError, ExperimentConfig, default_config, load_config, validate_config

__all__ = [
    "CampaignFailure",
    "CampaignResult",
    "ConfigError",
    "ExperimentConfig",
    "UnknownView",
    "default_config",
    "emit_plot_data",
    "load_config",
    "run",
    "validate_config",
]
