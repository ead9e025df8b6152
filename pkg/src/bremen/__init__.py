"""Behaviour-regularised model-ensemble RL at desk scale."""
from .config import ExperimentConfig, parse_config
from .kernels import BACKEND
from .orchestrator import (deployment_efficiency_report, evaluate_policy, run_deployment_loop,
                           run_offline)

__all__ = ["BACKEND", "ExperimentConfig", "parse_config", "run_deployment_loop", "run_offline",
           "evaluate_policy", "deployment_efficiency_report"]
__version__ = "0.1.0"
