"""Personalized federated PCA with bi-sparse regularization for anomaly detection."""

__version__ = "0.1.0"

from .client import ABLATIONS, ClientState, HyperParams, init_client, local_round  # noqa: E402
from .detection import evaluate_run, reconstruction_scores, roc_auc  # noqa: E402
from .federation import (  # noqa: E402
    FederationRun,
    aggregate_V,
    global_lagrangian,
    init_run,
    monotonicity_check,
    run_round,
    run_to_completion,
)

__all__ = [
    "ABLATIONS",
    "ClientState",
    "FederationRun",
    "HyperParams",
    "aggregate_V",
    "evaluate_run",
    "global_lagrangian",
    "init_client",
    "init_run",
    "local_round",
    "monotonicity_check",
    "reconstruction_scores",
    "roc_auc",
    "run_round",
    "run_to_completion",
]
