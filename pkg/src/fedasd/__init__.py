"""Federated anomaly detection for developmental screening records."""

from .config import ExperimentConfig, parse_config, parse_text
from .datasets import Case, FederatedDataset, generate_synthetic, load_dataset
from .engine import run_centralized, run_federated, run_individual
from .errors import FedAsdError

__all__ = [
    "Case",
    "ExperimentConfig",
    "FedAsdError",
    "FederatedDataset",
    "generate_synthetic",
    "load_dataset",
    "parse_config",
    "parse_text",
    "run_centralized",
    "run_federated",
    "run_individual",
]

__version__ = "0.1.0"
