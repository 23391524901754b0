"""Client datasets, IID partitioning and per-round data provisioning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedrr import rng as rngs


@dataclass(frozen=True)
class ClientDataset:
    features: np.ndarray
    labels: np.ndarray
    client_id: int

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or x.shape[0] == 0:
            raise ValueError("client dataset must be a nonempty 2-D feature array")
        if y.shape != (x.shape[0],):
            raise ValueError("need exactly one label per sample")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def replace(self, features=None, labels=None) -> "ClientDataset":
        return ClientDataset(
            self.features if features is None else features,
            self.labels if labels is None else labels,
            self.client_id,
        )


def make_iid_partition(x, y, n_clients: int, rng: np.random.Generator) -> list[ClientDataset]:
    """Shuffle and split into ``n_clients`` equal disjoint shards.

    The ``n mod K`` leftover samples are dropped.  Client ids run from 1 to K.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    n = y.shape[0]
    if n_clients < 1:
        raise ValueError("need at least one client")
    if n_clients > n:
        raise ValueError(f"cannot split {n} samples among {n_clients} clients")
    size = n // n_clients
    order = rng.permutation(n)
    return [
        ClientDataset(x[order[k * size : (k + 1) * size]], y[order[k * size : (k + 1) * size]], k + 1)
        for k in range(n_clients)
    ]


class GaussianMixture:
    """Synthetic classification population: ``x = mu_y + N(0, I)``, ``y`` uniform.

    Class centres are drawn once from ``N(0, separation^2 I)``.
    """

    def __init__(self, n_features: int, n_classes: int, separation: float, rng: np.random.Generator):
        self.n_features = int(n_features)
        self.n_classes = int(n_classes)
        self.means = rng.normal(0.0, separation, size=(self.n_classes, self.n_features))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        y = rng.integers(0, self.n_classes, size=n)
        x = self.means[y] + rng.standard_normal((n, self.n_features))
        return x, y


class ClientData:
    """Hands out ``D_{t,k}`` for every round and client.

    With ``resample=False`` each client keeps one fixed shard for the whole run.
    With ``resample=True`` fresh data are provided every round: new draws from
    an infinite population, or a fresh random re-partition of a finite pool.
    """

    def __init__(
        self,
        n_clients: int,
        samples_per_client: int,
        seed: int,
        *,
        population: GaussianMixture | None = None,
        pool: tuple[np.ndarray, np.ndarray] | None = None,
        resample: bool = False,
        stream_prefix: tuple = (),
    ):
        if (population is None) == (pool is None):
            raise ValueError("provide exactly one of population or pool")
        self.n_clients = n_clients
        self.samples_per_client = samples_per_client
        self.seed = seed
        self.population = population
        self.pool = pool
        self.resample = resample
        self._prefix = tuple(stream_prefix)
        self._fixed: list[ClientDataset] | None = None
        if pool is not None and n_clients * samples_per_client > pool[1].shape[0]:
            raise ValueError("data pool too small for the requested clients x samples")
        if not resample:
            self._fixed = self._draw(self._stream("partition"))

    def _stream(self, *path) -> np.random.Generator:
        return rngs.stream(self.seed, *self._prefix, "data", *path)

    def _draw(self, rng: np.random.Generator) -> list[ClientDataset]:
        total = self.n_clients * self.samples_per_client
        if self.population is not None:
            x, y = self.population.sample(total, rng)
            # population draws are already IID; split in order
            return [
                ClientDataset(
                    x[k * self.samples_per_client : (k + 1) * self.samples_per_client],
                    y[k * self.samples_per_client : (k + 1) * self.samples_per_client],
                    k + 1,
                )
                for k in range(self.n_clients)
            ]
        x, y = self.pool
        idx = rng.choice(y.shape[0], size=total, replace=False)
        return make_iid_partition(x[idx], y[idx], self.n_clients, rng)

    def round(self, t: int) -> list[ClientDataset]:
        if self._fixed is not None:
            return self._fixed
        return self._draw(self._stream("round", t))
