"""Untargeted attacks on one client: label flipping, noisy samples, noisy parameters."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedrr import rng as rngs
from fedrr.errors import ConfigError
from fedrr.fedsim.data import ClientDataset

ATTACK_KINDS = ("none", "label_flip", "sample_poison", "model_poison")


@dataclass(frozen=True)
class AttackSpec:
    """Which client is attacked, from when, and how.

    Gaussian noise is written ``N(noise_mean, noise_param)``; whether
    ``noise_param`` is a variance (default) or a standard deviation is set by
    ``noise_param_kind``.
    """

    kind: str = "none"
    target_client: int = 1
    start_round: int = 51
    ratio: float = 0.004
    source_class: int = 0
    target_class: int | None = None
    noise_mean: float = 0.0
    noise_param: float = 1e-4
    noise_param_kind: str = "variance"

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"attack.kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if self.start_round < 1:
            raise ConfigError("attack.start_round must be >= 1")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError("attack.ratio must lie in (0, 1]")
        if self.noise_param < 0:
            raise ConfigError("attack.noise_param must be >= 0")
        if self.noise_param_kind not in ("variance", "std"):
            raise ConfigError("attack.noise_param_kind must be 'variance' or 'std'")
        if self.target_class is not None and self.target_class == self.source_class:
            raise ConfigError("attack.target_class must differ from attack.source_class")

    @property
    def noise_std(self) -> float:
        if self.noise_param_kind == "variance":
            return math.sqrt(self.noise_param)
        return float(self.noise_param)

    def validate_for(self, n_clients: int, phase1_rounds: int) -> None:
        if self.kind == "none":
            return
        if not 1 <= self.target_client <= n_clients:
            raise ConfigError(f"attack.target_client must lie in [1, {n_clients}]")
        if self.start_round <= phase1_rounds:
            raise ConfigError("attack.start_round must come after the Phase I rounds")


def flip_count(ratio: float, n: int) -> int:
    # the epsilon keeps products like (1/250) * 250 from rounding up to 2
    return min(n, math.ceil(ratio * n - 1e-9))


def flip_labels(
    data: ClientDataset,
    ratio: float,
    rng: np.random.Generator,
    source_class: int = 0,
    n_classes: int | None = None,
    target_class: int | None = None,
) -> ClientDataset:
    """Relabel ``ceil(ratio * n)`` of the ``n`` samples of ``source_class``.

    Each chosen sample gets ``target_class`` or, when that is None, a label
    drawn uniformly from the other classes.
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError("ratio must lie in (0, 1]")
    labels = data.labels.copy()
    if n_classes is None:
        n_classes = int(max(labels.max(), source_class)) + 1
    if n_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    candidates = np.flatnonzero(labels == source_class)
    if candidates.size == 0:
        raise ValueError("nothing to flip: no samples of the source class")
    chosen = rng.choice(candidates, size=flip_count(ratio, candidates.size), replace=False)
    if target_class is None:
        # uniform over the n_classes - 1 other labels
        draw = rng.integers(0, n_classes - 1, size=chosen.size)
        labels[chosen] = draw + (draw >= source_class)
    else:
        labels[chosen] = target_class
    return data.replace(labels=labels)


def poison_samples(data: ClientDataset, mean: float, std: float, rng: np.random.Generator) -> ClientDataset:
    """Add i.i.d. ``Normal(mean, std^2)`` noise to every feature entry."""
    if std < 0:
        raise ValueError("std must be >= 0")
    noise = mean + std * rng.standard_normal(data.features.shape)
    return data.replace(features=data.features + noise)


def poison_model(params: np.ndarray, std: float, rng: np.random.Generator, mean: float = 0.0) -> np.ndarray:
    """Add i.i.d. ``Normal(mean, std^2)`` noise to every parameter."""
    if std < 0:
        raise ValueError("std must be >= 0")
    params = np.asarray(params, dtype=np.float64)
    return params + (mean + std * rng.standard_normal(params.shape))


class Attacker:
    """Applies an :class:`AttackSpec` inside :func:`fedrr.fedsim.run_round`.

    Noise is fresh every round: round ``t`` draws from the stream
    ``(*stream_prefix, "attack", t)``.
    """

    def __init__(self, spec: AttackSpec, seed: int, n_classes: int, stream_prefix: tuple = ()):
        self.spec = spec
        self.seed = seed
        self.n_classes = n_classes
        self._prefix = tuple(stream_prefix)

    def active(self, t: int, client_id: int) -> bool:
        s = self.spec
        return s.kind != "none" and client_id == s.target_client and t >= s.start_round

    def _rng(self, t: int, what: str) -> np.random.Generator:
        return rngs.stream(self.seed, *self._prefix, "attack", what, t)

    def corrupt_data(self, t, client_id, data):
        if not self.active(t, client_id):
            return data
        s = self.spec
        if s.kind == "label_flip":
            return flip_labels(data, s.ratio, self._rng(t, "labels"), s.source_class, self.n_classes, s.target_class)
        if s.kind == "sample_poison":
            return poison_samples(data, s.noise_mean, s.noise_std, self._rng(t, "samples"))
        return data

    def corrupt_params(self, t, client_id, params):
        if not self.active(t, client_id) or self.spec.kind != "model_poison":
            return params
        return poison_model(params, self.spec.noise_std, self._rng(t, "params"), self.spec.noise_mean)
