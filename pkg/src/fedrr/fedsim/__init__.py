"""Desk-scale FedAvg simulator."""

from fedrr.fedsim.data import ClientData, ClientDataset, GaussianMixture, make_iid_partition
from fedrr.fedsim.models import MLP, LossModel, SoftmaxRegression, build_model
from fedrr.fedsim.training import (
    AttackHook,
    RoundRecord,
    TrainingConfig,
    aggregate,
    local_update,
    run_round,
)

__all__ = [
    "AttackHook",
    "ClientData",
    "ClientDataset",
    "GaussianMixture",
    "LossModel",
    "MLP",
    "RoundRecord",
    "SoftmaxRegression",
    "TrainingConfig",
    "aggregate",
    "build_model",
    "local_update",
    "make_iid_partition",
    "run_round",
]
