"""Experiment harness: configuration, initial data, checks and orchestration."""
from .checks import (Verdict, check_pinching_alpha, check_surface_conditions, monotonicity_verdict,
                     thm72_weight)
from .config import ExperimentConfig, load_config, parse_config
from .initial_data import make_initial_data
from .runner import RunResult, run_experiment

__all__ = ["Verdict", "check_pinching_alpha", "check_surface_conditions", "monotonicity_verdict",
           "thm72_weight", "ExperimentConfig", "load_config", "parse_config", "make_initial_data",
           "RunResult", "run_experiment"]
