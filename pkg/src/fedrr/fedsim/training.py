"""FedAvg rounds: local minibatch SGD per client and unweighted averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from fedrr.errors import ConfigError
from fedrr.fedsim.data import ClientDataset
from fedrr.fedsim.models import LossModel


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.001
    epochs_per_round: int = 3
    minibatch_size: int = 128
    rounds: int = 1050
    client_count: int = 5
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("training.learning_rate must be > 0")
        for name in ("epochs_per_round", "minibatch_size", "rounds"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"training.{name} must be a positive integer")
        if self.client_count < 2:
            raise ConfigError("training.client_count must be at least 2")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("training.rng_seed must be a 64-bit unsigned integer")


class AttackHook(Protocol):
    """What :func:`run_round` needs from an attacker.

    Client ids are 1-based.  Both methods must return their input unchanged
    for clients or rounds they do not touch.
    """

    def corrupt_data(self, t: int, client_id: int, data: ClientDataset) -> ClientDataset: ...

    def corrupt_params(self, t: int, client_id: int, params: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class RoundRecord:
    t: int
    global_params: np.ndarray  # w_{t-1}
    local_params: np.ndarray  # K x p, as computed by each client
    transmitted: np.ndarray  # K x p, what the server received
    aggregated: np.ndarray  # w_t
    included: tuple[int, ...]  # client ids averaged into w_t

    @property
    def deltas(self) -> np.ndarray:
        """``K x p`` transmitted updates ``w_t^(k) - w_{t-1}``."""
        return self.transmitted - self.global_params


def local_update(
    model: LossModel,
    start: np.ndarray,
    data: ClientDataset,
    cfg: TrainingConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run ``epochs_per_round`` epochs of minibatch SGD from ``start``.

    The sample order is reshuffled every epoch from ``rng``; the last
    minibatch of an epoch may be short.
    """
    if len(data) == 0:
        raise ValueError("empty client dataset")
    w = np.array(start, dtype=np.float64, copy=True)
    if w.shape != (model.parameter_count,):
        raise ValueError(f"start has shape {w.shape}, model expects ({model.parameter_count},)")
    n = len(data)
    b = cfg.minibatch_size
    for _ in range(cfg.epochs_per_round):
        order = rng.permutation(n)
        for i in range(0, n, b):
            idx = order[i : i + b]
            w -= cfg.learning_rate * model.gradient(w, data.features[idx], data.labels[idx])
    return w


def aggregate(updates: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinatewise mean of the client parameter vectors."""
    if len(updates) == 0:
        raise ValueError("nothing to aggregate")
    shapes = {np.shape(u) for u in updates}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch among updates: {sorted(shapes)}")
    return np.mean(np.asarray(updates, dtype=np.float64), axis=0)


def run_round(
    t: int,
    model: LossModel,
    global_params: np.ndarray,
    clients: Sequence[ClientDataset],
    cfg: TrainingConfig,
    client_rngs: Sequence[np.random.Generator],
    attack: AttackHook | None = None,
    exclude: Sequence[int] = (),
) -> RoundRecord:
    """Transmit, train locally, apply the attacker, then average.

    ``exclude`` lists client ids left out of the average; their updates are
    still recorded so the monitor sees them.
    """
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    if len(clients) != len(client_rngs):
        raise ValueError("need one rng stream per client")
    w_prev = np.asarray(global_params, dtype=np.float64)
    local, sent = [], []
    for data, rng in zip(clients, client_rngs):
        k = data.client_id
        if attack is not None:
            data = attack.corrupt_data(t, k, data)
        w_k = local_update(model, w_prev, data, cfg, rng)
        local.append(w_k)
        sent.append(attack.corrupt_params(t, k, w_k) if attack is not None else w_k)
    local_arr = np.asarray(local)
    sent_arr = np.asarray(sent)
    included = tuple(c.client_id for c in clients if c.client_id not in set(exclude))
    if not included:
        raise ValueError("every client is excluded from aggregation")
    rows = [i for i, c in enumerate(clients) if c.client_id in included]
    return RoundRecord(
        t=t,
        global_params=w_prev,
        local_params=local_arr,
        transmitted=sent_arr,
        aggregated=aggregate(sent_arr[rows]),
        included=included,
    )
