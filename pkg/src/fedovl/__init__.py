"""Federated open-vocabulary learning simulator.

A desk-scale simulator for adapting a frozen vision-language encoder pair in
a federated setting where test queries involve classes no client trained on.
Everything runs in embedding space: clients train a gating adapter plus
per-class prompt residuals on local shards, the server blends adapters with
similarity-derived weights per new user, and inference combines text
prototypes with entropy-gated visual prototypes accumulated over the query
stream. Real encoder features come in through FMEB embedding files; a
synthetic generator covers everything else.
"""

from .adapter import AdapterParams, ClientResiduals
from .client import ClientState, ClientUpdate
from .data import EmbeddingDataset, FederatedSplit, SyntheticConfig
from .experiment import ExperimentConfig, run_experiment
from .metrics import ConfusionMatrix
from .prototyping import InferenceConfig, PrototypeStore
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "ClientResiduals",
    "ClientState",
    "ClientUpdate",
    "ConfusionMatrix",
    "EmbeddingDataset",
    "ExperimentConfig",
    "FederatedSplit",
    "InferenceConfig",
    "PrototypeStore",
    "SyntheticConfig",
    "TrainConfig",
    "run_experiment",
]
