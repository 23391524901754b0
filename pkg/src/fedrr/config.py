"""Experiment configuration: dataclasses, presets and the YAML file format.

Config files are YAML mappings whose keys are flat dotted paths
(``training.learning_rate: 0.001``); nested mappings are accepted too and
flattened on load.  Every key is listed in :data:`SCHEMA_DOC`.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from fedrr.attacks import AttackSpec
from fedrr.errors import ConfigError
from fedrr.fedsim.training import TrainingConfig
from fedrr.monitor import ALLOWANCE_RULES, VARIANTS


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "mlp"
    hidden: int = 512

    def __post_init__(self):
        if self.kind not in ("mlp", "logistic"):
            raise ConfigError("model.kind must be 'mlp' or 'logistic'")
        if self.kind == "mlp" and self.hidden < 1:
            raise ConfigError("model.hidden must be positive for an mlp")


@dataclass(frozen=True)
class DataSpec:
    source: str = "synthetic"
    features: int = 32
    classes: int = 10
    separation: float = 1.0
    samples_per_client: int = 256
    resample_each_round: bool = True
    mnist_images: str | None = None
    mnist_labels: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "mnist"):
            raise ConfigError("data.source must be 'synthetic' or 'mnist'")
        if self.features < 1 or self.classes < 2 or self.samples_per_client < 1:
            raise ConfigError("data.features >= 1, data.classes >= 2 and data.samples_per_client >= 1 required")
        if self.source == "mnist" and not (self.mnist_images and self.mnist_labels):
            raise ConfigError("data.mnist_images and data.mnist_labels are required for MNIST")


@dataclass(frozen=True)
class Phase1Spec:
    rounds: int = 50
    variance_target: float = 0.95

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("phase1.rounds must be >= 1")
        if not 0.0 < self.variance_target <= 1.0:
            raise ConfigError("phase1.variance_target must lie in (0, 1]")


@dataclass(frozen=True)
class MonitorSpec:
    variant: str = "fedrr"
    d: float = 0.5
    H: float | None = None
    arl0: float = 30.0
    allowance_rule: str = "half"
    calibration_replications: int = 10_000
    stop_on_alarm: bool = True
    exclude_flagged: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"monitor.variant must be one of {VARIANTS}")
        if not self.d > 0:
            raise ConfigError("monitor.d must be > 0")
        if self.H is not None and self.H < 0:
            raise ConfigError("monitor.H must be >= 0")
        if not self.arl0 > 1:
            raise ConfigError("monitor.arl0 must exceed 1")
        if self.allowance_rule not in ALLOWANCE_RULES:
            raise ConfigError(f"monitor.allowance_rule must be one of {ALLOWANCE_RULES}")
        if self.calibration_replications < 1:
            raise ConfigError("monitor.calibration_replications must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    phase1: Phase1Spec = field(default_factory=Phase1Spec)
    monitor: MonitorSpec = field(default_factory=MonitorSpec)
    attack: AttackSpec = field(default_factory=AttackSpec)
    replications: int = 1
    output_dir: str = "runs/experiment"
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.training.rounds <= self.phase1.rounds:
            raise ConfigError("training.rounds must exceed phase1.rounds (it caps Phase I + Phase II)")
        self.attack.validate_for(self.training.client_count, self.phase1.rounds)

    @property
    def K(self) -> int:
        return self.training.client_count

    def replace(self, **flat: Any) -> "ExperimentConfig":
        """Copy with flat dotted keys overridden."""
        values = to_flat(self)
        for key, value in flat.items():
            if key not in values:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = value
        return from_flat(values)


_SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _is_section(f: dataclasses.Field) -> bool:
    return f.default_factory is not dataclasses.MISSING  # type: ignore[misc]


def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _coerce(key: str, value: Any, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(key, value, args[0])
    if value is None:
        raise ConfigError(f"{key} may not be null")
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    raise TypeError(f"unsupported field type {hint!r} for {key}")


def to_flat(cfg: ExperimentConfig) -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for name, f in _SECTIONS.items():
        value = getattr(cfg, name)
        if _is_section(f):
            for sub in dataclasses.fields(value):
                flat[f"{name}.{sub.name}"] = getattr(value, sub.name)
        else:
            flat[name] = value
    return flat


def _flatten(mapping: dict, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in mapping.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, path + "."))
        else:
            out[path] = value
    return out


def from_flat(flat: dict[str, Any]) -> ExperimentConfig:
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    top_hints = _hints(ExperimentConfig)
    for key, value in flat.items():
        head, _, rest = key.partition(".")
        f = _SECTIONS.get(head)
        if f is None:
            raise ConfigError(f"unknown config key {key!r}")
        if _is_section(f):
            cls = top_hints[head]
            hints = _hints(cls)
            if rest not in hints:
                raise ConfigError(f"unknown config key {key!r}")
            sections.setdefault(head, {})[rest] = _coerce(key, value, hints[rest])
        else:
            if rest:
                raise ConfigError(f"unknown config key {key!r}")
            top[head] = _coerce(key, value, top_hints[head])
    try:
        built = {name: top_hints[name](**vals) for name, vals in sections.items()}
        return ExperimentConfig(**built, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of keys to values")
    return from_flat(_flatten(raw))


def emit(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_flat(cfg), sort_keys=False, default_flow_style=False)


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)


def save(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(emit(cfg), encoding="utf-8")


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with the value read as a YAML scalar."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {item!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value in {item!r}: {exc}") from exc
    return key.strip(), value


# Desk-scale presets.  "desk" uses the reference hyper-parameters
# (K=5, T0=50, eta=0.001, 3 epochs, batch 128) on a ~2.2e4 parameter MLP.
PRESETS: dict[str, dict[str, Any]] = {
    "desk": {},
    "uniformity": {
        "training.client_count": 3,
        "training.rounds": 2050,
        "monitor.stop_on_alarm": False,
        "monitor.H": 1e9,
        "output_dir": "runs/uniformity",
    },
    "lowrank": {"output_dir": "runs/lowrank"},
    "model_poison": {
        "attack.kind": "model_poison",
        "attack.target_client": 5,
        "attack.start_round": 51,
        "attack.noise_param": 1.5e-5,
        "attack.noise_param_kind": "std",
        "replications": 100,
        "output_dir": "runs/model_poison",
    },
}


def preset(name: str) -> ExperimentConfig:
    try:
        overrides = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ExperimentConfig().replace(**overrides)


SCHEMA_DOC = """\
model.kind                       mlp | logistic
model.hidden                     hidden width of the mlp
data.source                      synthetic | mnist
data.features                    input dimension of the synthetic Gaussian mixture
data.classes                     number of classes
data.separation                  std of the synthetic class centres
data.samples_per_client          samples held by each client per round
data.resample_each_round         fresh D_{t,k} every round (true) or one fixed shard per client (false)
data.mnist_images                IDX image file (required for mnist)
data.mnist_labels                IDX label file (required for mnist)
training.learning_rate           SGD step size
training.epochs_per_round        local epochs per round
training.minibatch_size          SGD minibatch size
training.rounds                  total round cap (Phase I + Phase II)
training.client_count            K
training.rng_seed                root seed of every random stream
phase1.rounds                    T0, attack-free start-up rounds
phase1.variance_target           variance share that fixes the subspace dimension q
monitor.variant                  fedrr | norm_benchmark
monitor.d                        CUSUM reference value
monitor.H                        control limit; null means calibrate from monitor.arl0
monitor.arl0                     in-control ARL target for calibration
monitor.allowance_rule           half (subtract d/2) | full (subtract d)
monitor.calibration_replications Monte-Carlo replications for calibration
monitor.stop_on_alarm            stop at the first alarm (true) or reset the flagged client and go on
monitor.exclude_flagged          leave flagged clients out of later aggregations
attack.kind                      none | label_flip | sample_poison | model_poison
attack.target_client             attacked client id, 1..K
attack.start_round               first attacked round, must exceed phase1.rounds
attack.ratio                     label_flip share of the source class
attack.source_class              label_flip source class
attack.target_class              label_flip fixed target, null for a random other class
attack.noise_mean                mean of the Gaussian noise
attack.noise_param               spread of the Gaussian noise
attack.noise_param_kind          variance | std: how noise_param is read
replications                     independent replications
output_dir                       output directory (relative paths resolve under $FEDRR_OUTPUT_ROOT)
workers                          parallel worker processes for replications
"""
