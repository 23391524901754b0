"""Detect adversarial federated-learning clients with rank-based subspace monitoring.

Clients' parameter updates are projected off a low-rank subspace learned in
an attack-free start-up phase; per-round residual ranks drive a
nonparametric multi-client CUSUM whose limit is calibrated by simulation.
"""

from fedrr.calibration import CalibrationConfig, estimate_arl, find_limit, search_limit
from fedrr.config import ExperimentConfig
from fedrr.experiment import compare_variants, run_experiment, run_lowrank_diagnostic
from fedrr.linalg_core import (
    SubspaceBasis,
    UpdateBuffer,
    explained_variance_profile,
    project_residual,
    truncated_pca,
)
from fedrr.monitor import CusumBank, cusum_step, normal_score, phase2_statistic, rank_residuals

__all__ = [
    "CalibrationConfig",
    "CusumBank",
    "ExperimentConfig",
    "SubspaceBasis",
    "UpdateBuffer",
    "compare_variants",
    "cusum_step",
    "estimate_arl",
    "explained_variance_profile",
    "find_limit",
    "normal_score",
    "phase2_statistic",
    "project_residual",
    "rank_residuals",
    "run_experiment",
    "run_lowrank_diagnostic",
    "search_limit",
    "truncated_pca",
]
