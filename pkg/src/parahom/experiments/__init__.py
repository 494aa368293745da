from .config import ConfigError, ExperimentConfig, default_config, load_config
from .rates import RateFit, fit_rate
from .pipelines import (
    run_corrector_decay,
    run_effective_f,
    run_estimate_mu,
    run_homog_rate,
    run_moment_decay,
    run_validate,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RateFit",
    "default_config",
    "fit_rate",
    "load_config",
    "run_corrector_decay",
    "run_effective_f",
    "run_estimate_mu",
    "run_homog_rate",
    "run_moment_decay",
    "run_validate",
]
