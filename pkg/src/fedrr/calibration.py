"""Monte-Carlo in-control ARL and the bisection search for the control limit.

With no attack, ranks are uniform random permutations independent over
rounds, so the in-control chart can be simulated from permutations alone
without any federated training.

Randomness is organised for common random numbers: replications are split
into groups of ``GROUP_SIZE`` and rounds into blocks of ``BLOCK_ROUNDS``.  The
scores of a (group, block) pair come from their own stream, so a given
replication sees exactly the same score path whatever ``H`` is being tried.
Run lengths are then pathwise nondecreasing in ``H``.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from fedrr import rng as rngs
from fedrr.errors import CalibrationError, ConfigError
from fedrr.monitor import ALLOWANCE_RULES, allowance

log = logging.getLogger(__name__)

GROUP_SIZE = 256
BLOCK_ROUNDS = 64
MAX_DOUBLINGS = 60
# probes that only need "above or below target" stop each run at this many multiples of the target
_PROBE_CAP_FACTOR = 40


@dataclass(frozen=True)
class ArlEstimate:
    H: float
    mean: float
    std_error: float
    replications: int
    censored: int = 0

    @property
    def censored_fraction(self) -> float:
        return self.censored / self.replications


@dataclass(frozen=True)
class CalibrationConfig:
    K: int = 5
    d: float = 0.5
    arl0: float = 30.0
    replications: int = 10_000
    max_rounds: int = 1_000_000
    h_lo: float = 0.0
    h_hi: float = 8.0
    tolerance: float = 1e-3
    rng_seed: int = 0
    allowance_rule: str = "half"
    workers: int = 1

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError("calibration needs K >= 2")
        if not self.d > 0:
            raise ConfigError("d must be > 0")
        if not self.arl0 > 1:
            raise ConfigError("target ARL0 must exceed 1")
        if self.replications < 1 or self.max_rounds < 1:
            raise ConfigError("replications and max_rounds must be positive")
        if not 0 <= self.h_lo < self.h_hi:
            raise ConfigError("need 0 <= h_lo < h_hi")
        if not self.tolerance > 0:
            raise ConfigError("tolerance must be > 0")
        if self.allowance_rule not in ALLOWANCE_RULES:
            raise ConfigError(f"allowance_rule must be one of {ALLOWANCE_RULES}")


def score_block(seed: int, group: int, block: int, n: int, K: int, rounds: int = BLOCK_ROUNDS) -> np.ndarray:
    """Normal scores of ``rounds`` in-control rounds for ``n`` replications: shape ``(rounds, n, K)``."""
    rng = rngs.stream(seed, "calibration", group, block)
    keys = rng.random((rounds, n, K))
    ranks = keys.argsort(axis=2).argsort(axis=2) + 1
    u = rng.random((rounds, n, K))
    u[u == 0.0] = np.nextafter(0.0, 1.0)
    return ndtri((ranks - u) / K)


def _run_group(args) -> tuple[np.ndarray, np.ndarray]:
    seed, group, n, K, H, k_ref, cap = args
    stats = np.zeros((n, K))
    lengths = np.full(n, cap, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    block = 0
    while active.any() and block * BLOCK_ROUNDS < cap:
        z = score_block(seed, group, block, n, K)
        for i in range(BLOCK_ROUNDS):
            t = block * BLOCK_ROUNDS + i + 1
            if t > cap:
                break
            np.maximum(stats + z[i] - k_ref, 0.0, out=stats)
            hit = active & (stats.max(axis=1) > H)
            if hit.any():
                lengths[hit] = t
                active &= ~hit
                if not active.any():
                    break
        block += 1
    return lengths, active


def simulate_run_lengths(
    H: float,
    K: int,
    d: float,
    M: int,
    rng_seed: int = 0,
    *,
    max_rounds: int = 1_000_000,
    allowance_rule: str = "half",
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """In-control run lengths of ``M`` replications and their censoring mask.

    A run is counted from the first monitored round up to and including the
    alarm round; runs still silent after ``max_rounds`` are censored there.
    """
    if H < 0:
        raise ValueError("H must be >= 0")
    k_ref = allowance(d, allowance_rule)
    n_groups = math.ceil(M / GROUP_SIZE)
    jobs = [
        (rng_seed, g, min(GROUP_SIZE, M - g * GROUP_SIZE), K, H, k_ref, max_rounds)
        for g in range(n_groups)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_group, jobs))
    else:
        parts = [_run_group(j) for j in jobs]
    lengths = np.concatenate([p[0] for p in parts])
    censored = np.concatenate([p[1] for p in parts])
    return lengths, censored


def estimate_arl(
    H: float,
    K: int,
    d: float,
    M: int = 10_000,
    rng_seed: int = 0,
    *,
    max_rounds: int = 1_000_000,
    allowance_rule: str = "half",
    workers: int = 1,
) -> ArlEstimate:
    """Mean in-control run length at limit ``H`` with its standard error."""
    lengths, censored = simulate_run_lengths(
        H, K, d, M, rng_seed, max_rounds=max_rounds, allowance_rule=allowance_rule, workers=workers
    )
    n_cens = int(censored.sum())
    if n_cens:
        warnings.warn(
            f"{n_cens} of {M} runs reached max_rounds={max_rounds} without alarm at H={H}; "
            "the ARL estimate is biased low",
            RuntimeWarning,
            stacklevel=2,
        )
    se = float(lengths.std(ddof=1) / math.sqrt(M)) if M > 1 else math.nan
    return ArlEstimate(float(H), float(lengths.mean()), se, M, n_cens)


@dataclass
class LimitSearch:
    H: float
    estimate: ArlEstimate
    config: CalibrationConfig
    evaluations: list[tuple[float, float]] = field(default_factory=list)

    def record(self) -> dict:
        return {
            "H": self.H,
            "arl": self.estimate.mean,
            "std_error": self.estimate.std_error,
            "M": self.config.replications,
            "d": self.config.d,
            "K": self.config.K,
            "arl0": self.config.arl0,
            "allowance_rule": self.config.allowance_rule,
            "rng_seed": self.config.rng_seed,
        }


class _Evaluator:
    def __init__(self, cfg: CalibrationConfig):
        self.cfg = cfg
        self.probe_cap = min(cfg.max_rounds, max(1000, int(_PROBE_CAP_FACTOR * cfg.arl0)))
        self.log: list[tuple[float, float]] = []

    def full(self, H: float) -> ArlEstimate:
        c = self.cfg
        lengths, censored = simulate_run_lengths(
            H, c.K, c.d, c.replications, c.rng_seed,
            max_rounds=c.max_rounds, allowance_rule=c.allowance_rule, workers=c.workers,
        )
        if censored.any():
            raise CalibrationError(
                f"{int(censored.sum())} of {c.replications} runs hit max_rounds={c.max_rounds} "
                f"at H={H:.4f}; raise max_rounds or lower the bracket"
            )
        se = float(lengths.std(ddof=1) / math.sqrt(c.replications)) if c.replications > 1 else 0.0
        est = ArlEstimate(H, float(lengths.mean()), se, c.replications, 0)
        self.log.append((H, est.mean))
        return est

    def probe(self, H: float) -> tuple[bool, ArlEstimate | None]:
        """Whether ARL(H) exceeds the target; the estimate when it is exact."""
        c = self.cfg
        lengths, censored = simulate_run_lengths(
            H, c.K, c.d, c.replications, c.rng_seed,
            max_rounds=self.probe_cap, allowance_rule=c.allowance_rule, workers=c.workers,
        )
        lower_bound = float(lengths.mean())
        if not censored.any():
            se = float(lengths.std(ddof=1) / math.sqrt(c.replications)) if c.replications > 1 else 0.0
            est = ArlEstimate(H, lower_bound, se, c.replications, 0)
            self.log.append((H, est.mean))
            return est.mean > c.arl0, est
        if lower_bound > c.arl0:
            self.log.append((H, lower_bound))
            return True, None
        est = self.full(H)
        return est.mean > c.arl0, est


def search_limit(cfg: CalibrationConfig) -> LimitSearch:
    """Bisection for the ``H`` whose in-control ARL matches ``cfg.arl0``."""
    ev = _Evaluator(cfg)
    lo, hi = cfg.h_lo, cfg.h_hi

    above, _ = ev.probe(lo)
    shrinks = 0
    while above:
        if lo == 0.0 or shrinks >= MAX_DOUBLINGS:
            raise CalibrationError(f"ARL already exceeds {cfg.arl0} at H={lo}; no valid lower bracket")
        hi, lo = lo, max(0.0, lo - (hi - lo))
        shrinks += 1
        above, _ = ev.probe(lo)

    above, _ = ev.probe(hi)
    step = hi - lo
    doublings = 0
    while not above:
        if doublings >= MAX_DOUBLINGS:
            raise CalibrationError(f"could not bracket ARL0={cfg.arl0} after {MAX_DOUBLINGS} doublings")
        lo, step = hi, 2 * step
        hi = lo + step
        doublings += 1
        log.debug("expanding bracket to [%g, %g]", lo, hi)
        above, _ = ev.probe(hi)

    while hi - lo >= cfg.tolerance:
        mid = 0.5 * (lo + hi)
        above, est = ev.probe(mid)
        if est is not None and abs(est.mean - cfg.arl0) <= 2.0 * est.std_error:
            return LimitSearch(mid, est, cfg, ev.log)
        if above:
            hi = mid
        else:
            lo = mid
    mid = 0.5 * (lo + hi)
    return LimitSearch(mid, ev.full(mid), cfg, ev.log)


def find_limit(cfg: CalibrationConfig) -> float:
    return search_limit(cfg).H
