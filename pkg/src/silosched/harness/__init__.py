from .config import ExperimentConfig, apply_preset, load_config, save_config
from .runner import run_experiment, run_scale_sweep, run_variant_suite

__all__ = [
    "ExperimentConfig",
    "apply_preset",
    "load_config",
    "save_config",
    "run_experiment",
    "run_scale_sweep",
    "run_variant_suite",
]
