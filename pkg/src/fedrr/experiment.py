"""End-to-end runs: Phase I collection, subspace fit, Phase II monitoring."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from fedrr import config as cfgmod
from fedrr import rng as rngs
from fedrr.attacks import Attacker
from fedrr.calibration import CalibrationConfig, search_limit
from fedrr.config import ExperimentConfig
from fedrr.errors import ConfigError, NumericalError
from fedrr.fedsim import ClientData, GaussianMixture, aggregate, build_model, run_round
from fedrr.fedsim import mnist
from fedrr.linalg_core import (
    UpdateBuffer,
    components_for,
    gram_profiles,
    pca_with_profile,
)
from fedrr.monitor import RankCusumMonitor, RoundTrace, allowance, phase2_statistic

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "FEDRR_OUTPUT_ROOT"
TRACE_NAME = "trace.csv"
REPORT_NAME = "report.json"
SUMMARY_NAME = "summary.json"


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def trace_header(K: int) -> list[str]:
    cols = ["round"]
    for name in ("residual", "rank", "z", "s"):
        cols += [f"{name}_{k}" for k in range(1, K + 1)]
    return cols + ["max_s", "alarmed", "flagged_client"]


def trace_row(tr: RoundTrace) -> list:
    dec = tr.decision
    return (
        [tr.t]
        + [repr(float(v)) for v in tr.residuals]
        + [int(v) for v in tr.ranks]
        + [repr(float(v)) for v in tr.scores]
        + [repr(float(v)) for v in tr.stats]
        + [repr(dec.statistic), int(dec.alarmed), "" if dec.flagged_client is None else dec.flagged_client]
    )


@dataclass
class ReplicationResult:
    replication: int
    detection_length: int | None  # Phase II rounds up to and including the first alarm
    alarm_round: int | None
    flagged_client: int | None
    correct_identification: bool | None  # None when no attack is configured
    censored: bool
    phase2_rounds: int
    q: int | None
    components_95: int
    profile: list[float]
    alarms: list[list[int]] = field(default_factory=list)  # [round, client] pairs

    def to_json(self) -> dict:
        return asdict(self)


class _Simulation:
    """Everything one replication needs, built from streams under ``("rep", i)``."""

    def __init__(self, cfg: ExperimentConfig, replication: int):
        self.cfg = cfg
        seed = cfg.training.rng_seed
        prefix = ("rep", replication)
        ds = cfg.data
        if ds.source == "synthetic":
            population = GaussianMixture(ds.features, ds.classes, ds.separation, rngs.stream(seed, "population"))
            self.data = ClientData(
                cfg.K, ds.samples_per_client, seed,
                population=population, resample=ds.resample_each_round, stream_prefix=prefix,
            )
            n_features, n_classes = ds.features, ds.classes
        else:
            try:
                x, y = mnist.load(ds.mnist_images, ds.mnist_labels)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load MNIST: {exc}") from exc
            self.data = ClientData(
                cfg.K, ds.samples_per_client, seed,
                pool=(x, y), resample=ds.resample_each_round, stream_prefix=prefix,
            )
            n_features, n_classes = x.shape[1], max(ds.classes, int(y.max()) + 1)
        self.n_classes = n_classes
        self.model = build_model(cfg.model.kind, n_features, n_classes, cfg.model.hidden)
        self.params = self.model.init_params(rngs.stream(seed, *prefix, "init"))
        self.client_rngs = [rngs.stream(seed, *prefix, "shuffle", k) for k in range(1, cfg.K + 1)]
        self.attacker = Attacker(cfg.attack, seed, n_classes, prefix)

    def step(self, t: int, exclude=()):
        rec = run_round(
            t, self.model, self.params, self.data.round(t), self.cfg.training,
            self.client_rngs, self.attacker, exclude,
        )
        return rec

    def phase1(self) -> UpdateBuffer:
        cfg = self.cfg
        buf = UpdateBuffer(self.model.parameter_count, cfg.phase1.rounds * cfg.K)
        for t in range(1, cfg.phase1.rounds + 1):
            rec = self.step(t)
            buf.extend(rec.deltas)
            self.params = rec.aggregated
        mat = buf.matrix
        if not np.all(np.isfinite(mat)):
            raise NumericalError("degenerate training: non-finite Phase I updates")
        if not np.any(mat):
            raise NumericalError("degenerate training: all Phase I updates are zero")
        return buf


class _VariantRun:
    """Monitor state and trace of one statistic along a shared trajectory."""

    def __init__(self, cfg: ExperimentConfig, variant: str, H: float, rng):
        self.variant = variant
        self.monitor = RankCusumMonitor(cfg.K, cfg.monitor.d, H, rng, cfg.monitor.allowance_rule)
        self.rows: list[list] = []
        self.alarms: list[list[int]] = []
        self.last_round = cfg.phase1.rounds
        self.done = False


def run_replications(
    cfg: ExperimentConfig,
    replication: int,
    H: float,
    variants: tuple[str, ...] | None = None,
    out_dir: Path | None = None,
) -> dict[str, ReplicationResult]:
    """Run one replication and monitor it with each statistic in ``variants``.

    The federated trajectory does not depend on the monitor unless flagged
    clients are excluded, so several statistics can share one trajectory; each
    gets its own copy of the monitor stream and the result for every variant
    is identical to a separate run with the same seed.
    """
    variants = variants or (cfg.monitor.variant,)
    if cfg.monitor.exclude_flagged and len(variants) > 1:
        raise ConfigError("exclude_flagged couples training to the monitor; run one variant at a time")
    seed = cfg.training.rng_seed
    sim = _Simulation(cfg, replication)
    buf = sim.phase1()
    basis, profile = pca_with_profile(buf, cfg.phase1.variance_target)
    T0 = cfg.phase1.rounds
    runs = [_VariantRun(cfg, v, H, rngs.stream(seed, "rep", replication, "monitor")) for v in variants]
    excluded: set[int] = set()

    for t in range(T0 + 1, cfg.training.rounds + 1):
        if all(r.done for r in runs):
            break
        everyone_out = len(excluded) == cfg.K
        # with every client excluded the server has nothing to average and keeps its model
        rec = sim.step(t, exclude=() if everyone_out else sorted(excluded))
        params = sim.params if everyone_out else rec.aggregated
        for run in runs:
            if run.done:
                continue
            b = basis if run.variant == "fedrr" else None
            residuals = [phase2_statistic(delta, b, run.variant) for delta in rec.deltas]
            tr = run.monitor.observe(t, residuals)
            run.rows.append(trace_row(tr))
            run.last_round = t
            if not tr.decision.alarmed:
                continue
            k_star = tr.decision.flagged_client
            run.alarms.append([t, k_star])
            if cfg.monitor.stop_on_alarm:
                run.done = True
                continue
            run.monitor.reset_client(k_star)
            if cfg.monitor.exclude_flagged and k_star not in excluded:
                # flagged before aggregation, so this round's average already drops it
                excluded.add(k_star)
                keep = [i for i in range(cfg.K) if i + 1 not in excluded]
                params = aggregate(rec.transmitted[keep]) if keep else sim.params
        sim.params = params

    attacked = cfg.attack.kind != "none"
    results = {}
    for run in runs:
        first = run.alarms[0] if run.alarms else None
        result = ReplicationResult(
            replication=replication,
            detection_length=None if first is None else first[0] - T0,
            alarm_round=None if first is None else first[0],
            flagged_client=None if first is None else first[1],
            correct_identification=(None if not attacked or first is None else first[1] == cfg.attack.target_client),
            censored=first is None,
            phase2_rounds=run.last_round - T0,
            q=basis.q if run.variant == "fedrr" else None,
            components_95=components_for(profile, 0.95),
            profile=[float(v) for v in profile],
            alarms=run.alarms,
        )
        results[run.variant] = result
        if out_dir is not None:
            rep_dir = out_dir / (run.variant if len(runs) > 1 else "") / f"rep_{replication:04d}"
            _write_replication(rep_dir, cfg, H, run.variant, result, run.rows)
    return results


def run_replication(cfg: ExperimentConfig, replication: int, H: float, out_dir: Path | None = None) -> ReplicationResult:
    return run_replications(cfg, replication, H, None, out_dir)[cfg.monitor.variant]


def _write_replication(rep_dir: Path, cfg: ExperimentConfig, H: float, variant: str,
                       result: ReplicationResult, rows: list[list]) -> None:
    rep_dir.mkdir(parents=True, exist_ok=True)
    with open(rep_dir / TRACE_NAME, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(trace_header(cfg.K))
        w.writerows(rows)
    _write_json(rep_dir / REPORT_NAME, {
        "replication": result.to_json(),
        "monitor": {
            "variant": variant,
            "H": H,
            "d": cfg.monitor.d,
            "allowance_rule": cfg.monitor.allowance_rule,
            "stop_on_alarm": cfg.monitor.stop_on_alarm,
            "K": cfg.K,
            "T0": cfg.phase1.rounds,
        },
    })


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class RunReport:
    config: dict
    H: float
    calibration: dict | None
    replications: list[ReplicationResult]

    def summary(self) -> dict:
        lengths = [r.detection_length for r in self.replications if r.detection_length is not None]
        n = len(self.replications)
        n_alarm = len(lengths)
        arr = np.asarray(lengths, dtype=np.float64)
        flags = [r.correct_identification for r in self.replications if r.correct_identification is not None]
        qs = [r.q for r in self.replications if r.q is not None]
        return {
            "replications": n,
            "alarmed": n_alarm,
            "censored": n - n_alarm,
            "censored_fraction": (n - n_alarm) / n,
            "arl_mean": float(arr.mean()) if n_alarm else None,
            "arl_std": float(arr.std(ddof=1)) if n_alarm > 1 else None,
            "arl_std_error": float(arr.std(ddof=1) / math.sqrt(n_alarm)) if n_alarm > 1 else None,
            "identification_rate": (sum(flags) / len(flags)) if flags else None,
            "q_mean": float(np.mean(qs)) if qs else None,
        }

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "H": self.H,
            "calibration": self.calibration,
            "summary": self.summary(),
            "per_replication": [
                {k: v for k, v in r.to_json().items() if k != "profile"} for r in self.replications
            ],
            "phase1_profile_first_replication": self.replications[0].profile if self.replications else [],
        }


def calibrate_for(cfg: ExperimentConfig) -> tuple[float, dict | None]:
    if cfg.monitor.H is not None:
        return cfg.monitor.H, None
    search = search_limit(
        CalibrationConfig(
            K=cfg.K,
            d=cfg.monitor.d,
            arl0=cfg.monitor.arl0,
            replications=cfg.monitor.calibration_replications,
            rng_seed=cfg.training.rng_seed,
            allowance_rule=cfg.monitor.allowance_rule,
        )
    )
    return search.H, search.record()


def _replication_job(args):
    cfg, i, H, variants, out_dir = args
    return run_replications(cfg, i, H, variants, out_dir)


def _run(cfg: ExperimentConfig, variants: tuple[str, ...], write: bool) -> dict[str, RunReport]:
    H, calib = calibrate_for(cfg)
    out_dir = resolve_output_dir(cfg) if write else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.yaml").write_text(cfgmod.emit(cfg), encoding="utf-8")
    jobs = [(cfg, i, H, variants, out_dir) for i in range(cfg.replications)]
    if cfg.workers > 1 and cfg.replications > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_rep = list(pool.map(_replication_job, jobs))
    else:
        per_rep = []
        for job in jobs:
            per_rep.append(_replication_job(job))
            log.info("replication %d done", job[1])
    reports = {}
    for v in variants:
        vcfg = cfg if v == cfg.monitor.variant else cfg.replace(**{"monitor.variant": v})
        report = RunReport(cfgmod.to_flat(vcfg), H, calib, [r[v] for r in per_rep])
        reports[v] = report
        if out_dir is not None:
            target = out_dir / v if len(variants) > 1 else out_dir
            target.mkdir(parents=True, exist_ok=True)
            _write_json(target / SUMMARY_NAME, report.to_json())
    return reports


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunReport:
    """Calibrate if needed, then run every replication with the configured statistic."""
    return _run(cfg, (cfg.monitor.variant,), write)[cfg.monitor.variant]


def compare_variants(
    cfg: ExperimentConfig,
    variants: tuple[str, ...] = ("fedrr", "norm_benchmark"),
    write: bool = True,
) -> dict[str, RunReport]:
    """Several statistics on matched trajectories; one report per statistic."""
    return _run(cfg, tuple(variants), write)


LOWRANK_FRACTIONS = (0.90, 0.95, 0.99)


def run_lowrank_diagnostic(cfg: ExperimentConfig, write: bool = True) -> list[dict]:
    """Components needed for 90/95/99 % of the variance of the first ``T*K`` updates."""
    if cfg.attack.kind != "none":
        raise ConfigError("the low-rank diagnostic runs without an attack")
    sim = _Simulation(cfg, 0)
    buf = sim.phase1()
    counts = [t * cfg.K for t in range(1, cfg.phase1.rounds + 1)]
    rows = []
    for t, n_cols, prof in zip(range(1, cfg.phase1.rounds + 1), counts, gram_profiles(buf, counts)):
        row = {"T": t, "columns": n_cols}
        for frac in LOWRANK_FRACTIONS:
            row[f"components_{int(round(frac * 100))}"] = components_for(prof, frac)
        rows.append(row)
    if write:
        out_dir = resolve_output_dir(cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "lowrank.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows


@dataclass
class ReplayResult:
    rows: int
    mismatches: list[str]

    @property
    def ok(self) -> bool:
        return not self.mismatches


def replay_trace(path, d: float, H: float, allowance_rule: str = "half", reset_on_alarm: bool = False,
                 tol: float = 1e-12) -> ReplayResult:
    """Re-derive every row of a trace from its ranks and scores and compare."""
    k_ref = allowance(d, allowance_rule)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        K = sum(1 for c in reader.fieldnames or [] if c.startswith("rank_"))
        prev = np.zeros(K)
        bad: list[str] = []
        n = 0
        for row in reader:
            n += 1
            t = row["round"]
            res = np.array([float(row[f"residual_{k}"]) for k in range(1, K + 1)])
            ranks = np.array([int(row[f"rank_{k}"]) for k in range(1, K + 1)])
            z = np.array([float(row[f"z_{k}"]) for k in range(1, K + 1)])
            s = np.array([float(row[f"s_{k}"]) for k in range(1, K + 1)])
            if sorted(ranks) != list(range(1, K + 1)):
                bad.append(f"round {t}: ranks are not a permutation")
            order = np.argsort(ranks)
            if np.any(np.diff(res[order]) < 0):
                bad.append(f"round {t}: ranks disagree with residual order")
            u = ndtr(z) * K
            if np.any(u <= ranks - 1 - 1e-9) or np.any(u >= ranks + 1e-9):
                bad.append(f"round {t}: score outside its rank's quantile band")
            expect = np.maximum(prev + z - k_ref, 0.0)
            if np.max(np.abs(expect - s)) > tol:
                bad.append(f"round {t}: CUSUM recursion violated")
            top = float(row["max_s"])
            if abs(top - s.max()) > tol:
                bad.append(f"round {t}: max_s mismatch")
            alarmed = bool(int(row["alarmed"]))
            if alarmed != (top > H):
                bad.append(f"round {t}: alarm flag inconsistent with H")
            flagged = row["flagged_client"]
            want = str(int(np.argmax(s)) + 1) if alarmed else ""
            if flagged != want:
                bad.append(f"round {t}: flagged client {flagged!r}, expected {want!r}")
            prev = s.copy()
            if alarmed and reset_on_alarm:
                prev[int(np.argmax(s))] = 0.0
    return ReplayResult(n, bad)
