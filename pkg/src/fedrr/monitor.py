"""Rank-based nonparametric CUSUM over per-client residuals.

Per round the K residuals are turned into ranks (1 = smallest), each rank into
a randomized normal score ``Z = Phi^{-1}((rank - U) / K)`` with a fresh
``U ~ Uniform(0, 1)`` per client, and each client's score feeds a one-sided
CUSUM ``S <- max(0, S + Z - allowance)``.  The chart alarms when the largest
statistic exceeds ``H`` and blames the client holding it.

The allowance defaults to ``d / 2``.  ``allowance_rule="full"`` subtracts ``d``
itself, the convention that reproduces the reference control limits for
K = 5, ARL0 = 30.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtri

from fedrr.linalg_core import SubspaceBasis, project_residual

VARIANTS = ("fedrr", "norm_benchmark")
ALLOWANCE_RULES = ("half", "full")


def allowance(d: float, rule: str = "half") -> float:
    if rule == "half":
        return d / 2.0
    if rule == "full":
        return d
    raise ValueError(f"allowance rule must be one of {ALLOWANCE_RULES}, got {rule!r}")


def rank_residuals(residuals, rng: np.random.Generator) -> np.ndarray:
    """Ascending ranks ``1..K``; tied values get a uniformly random order."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least two residuals")
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite residual")
    order = np.lexsort((rng.random(r.size), r))
    ranks = np.empty(r.size, dtype=np.int64)
    ranks[order] = np.arange(1, r.size + 1)
    return ranks


def normal_score(rank, K: int, u) -> np.ndarray | float:
    """``Phi^{-1}((rank - u) / K)`` for given uniform draws ``u``."""
    return ndtri((np.asarray(rank, dtype=np.float64) - u) / K)


def draw_normal_scores(ranks, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Scores for a full rank vector; returns ``(z, u)``, one ``u`` per client."""
    ranks = np.asarray(ranks)
    K = ranks.size
    u = rng.random(K)
    # random() can return exactly 0; rank=K would then map to +inf
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return normal_score(ranks, K, u), u


@dataclass(frozen=True)
class MonitorDecision:
    t: int
    statistic: float
    alarmed: bool
    flagged_client: int | None  # 1-based, only set on alarm


@dataclass(frozen=True)
class CusumBank:
    stats: np.ndarray
    d: float
    H: float
    t: int = 0
    allowance_rule: str = "half"

    def __post_init__(self):
        s = np.asarray(self.stats, dtype=np.float64)
        if s.ndim != 1 or s.size < 1:
            raise ValueError("stats must be a nonempty vector")
        if np.any(s < 0):
            raise ValueError("CUSUM statistics are nonnegative")
        if not self.d > 0 or not self.H >= 0:
            raise ValueError("need d > 0 and H >= 0")
        allowance(self.d, self.allowance_rule)
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "stats", s)

    @classmethod
    def start(cls, K: int, d: float, H: float, allowance_rule: str = "half") -> "CusumBank":
        return cls(np.zeros(K), d, H, 0, allowance_rule)

    @property
    def K(self) -> int:
        return self.stats.size

    @property
    def allowance(self) -> float:
        return allowance(self.d, self.allowance_rule)

    def reset_client(self, client_id: int) -> "CusumBank":
        stats = self.stats.copy()
        stats[client_id - 1] = 0.0
        return replace(self, stats=stats)


def cusum_step(bank: CusumBank, scores) -> tuple[CusumBank, MonitorDecision]:
    z = np.asarray(scores, dtype=np.float64)
    if z.shape != bank.stats.shape:
        raise ValueError(f"expected {bank.K} scores, got shape {z.shape}")
    stats = np.maximum(bank.stats + z - bank.allowance, 0.0)
    t = bank.t + 1
    top = float(stats.max())
    alarmed = top > bank.H
    # np.argmax returns the first maximiser: lowest client index wins ties
    flagged = int(np.argmax(stats)) + 1 if alarmed else None
    return replace(bank, stats=stats, t=t), MonitorDecision(t, top, alarmed, flagged)


def phase2_statistic(delta, basis: SubspaceBasis | None, variant: str = "fedrr") -> float:
    """Residual off the Phase I subspace (``fedrr``) or the plain update norm."""
    if variant == "fedrr":
        if basis is None:
            raise ValueError("the fedrr statistic needs a fitted basis")
        return project_residual(delta, basis)
    if variant == "norm_benchmark":
        return float(np.linalg.norm(np.asarray(delta, dtype=np.float64)))
    raise ValueError(f"unknown monitor variant {variant!r}")


@dataclass
class RoundTrace:
    t: int
    residuals: np.ndarray
    ranks: np.ndarray
    scores: np.ndarray
    stats: np.ndarray
    decision: MonitorDecision


@dataclass
class RankCusumMonitor:
    """Stateful wrapper used by the experiment runner."""

    K: int
    d: float
    H: float
    rng: np.random.Generator
    allowance_rule: str = "half"
    bank: CusumBank = field(init=False)

    def __post_init__(self):
        self.bank = CusumBank.start(self.K, self.d, self.H, self.allowance_rule)

    def observe(self, t: int, residuals) -> RoundTrace:
        ranks = rank_residuals(residuals, self.rng)
        scores, _ = draw_normal_scores(ranks, self.rng)
        self.bank, decision = cusum_step(self.bank, scores)
        decision = replace(decision, t=t)
        return RoundTrace(t, np.asarray(residuals, dtype=np.float64), ranks, scores, self.bank.stats, decision)

    def reset_client(self, client_id: int) -> None:
        self.bank = self.bank.reset_client(client_id)
