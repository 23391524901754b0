from __future__ import annotations

import math

import numpy as np
import pytest

from fedrr import rng as rngs
from fedrr.attacks import Attacker, AttackSpec
from fedrr.errors import ConfigError
from fedrr.fedsim import (
    MLP,
    ClientData,
    ClientDataset,
    GaussianMixture,
    LossModel,
    SoftmaxRegression,
    TrainingConfig,
    aggregate,
    build_model,
    local_update,
    make_iid_partition,
    run_round,
)


class Quadratic(LossModel):
    """Mean of ``0.5 ||w - x_i||^2``; labels are ignored."""

    def __init__(self, p):
        self.p = p

    @property
    def parameter_count(self):
        return self.p

    def loss(self, params, x, y):
        return float(0.5 * np.mean(np.sum((params - x) ** 2, axis=1)))

    def gradient(self, params, x, y):
        return params - x.mean(axis=0)

    def init_params(self, rng):
        return np.zeros(self.p)


class Flat(Quadratic):
    def loss(self, params, x, y):
        return 1.0

    def gradient(self, params, x, y):
        return np.zeros(self.p)


def cfg(**kw):
    base = dict(learning_rate=0.1, epochs_per_round=1, minibatch_size=1, rounds=10, client_count=2)
    base.update(kw)
    return TrainingConfig(**base)


def central_diff(model, w, x, y, h=1e-6):
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (model.loss(w + e, x, y) - model.loss(w - e, x, y)) / (2 * h)
    return g


# --- models ---------------------------------------------------------------


@pytest.mark.parametrize(
    "model",
    [SoftmaxRegression(4, 3), MLP(3, 5, 4)],
    ids=["logistic", "mlp"],
)
def test_gradient_matches_finite_differences(model):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((7, model.n_features))
    y = rng.integers(0, model.n_classes, 7)
    for _ in range(3):
        w = rng.normal(0, 0.5, model.parameter_count)
        g = model.gradient(w, x, y)
        assert g.shape == (model.parameter_count,)
        fd = central_diff(model, w, x, y)
        assert np.linalg.norm(g - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)


def test_parameter_counts():
    assert SoftmaxRegression(32, 10).parameter_count == 330
    assert MLP(32, 512, 10).parameter_count == 512 * 33 + 10 * 513
    assert build_model("mlp", 32, 10, 512).parameter_count == 22026
    with pytest.raises(ValueError):
        build_model("cnn", 2, 2)
    with pytest.raises(ValueError):
        build_model("mlp", 2, 2, 0)


def test_softmax_loss_at_zero_is_log_c():
    model = SoftmaxRegression(3, 4)
    x = np.ones((2, 3))
    assert model.loss(np.zeros(model.parameter_count), x, np.array([0, 3])) == pytest.approx(math.log(4))


# --- local_update ---------------------------------------------------------


def test_constant_loss_is_a_fixed_point():
    data = ClientDataset(np.ones((5, 2)), np.zeros(5), 1)
    start = np.array([0.3, -2.0])
    out = local_update(Flat(2), start, data, cfg(epochs_per_round=3, minibatch_size=2), np.random.default_rng(0))
    np.testing.assert_array_equal(out, start)


def test_quadratic_single_step():
    data = ClientDataset(np.zeros((1, 2)), np.zeros(1), 1)
    out = local_update(Quadratic(2), np.array([1.0, 0.0]), data, cfg(), np.random.default_rng(0))
    np.testing.assert_allclose(out, [0.9, 0.0], atol=1e-15)


def _scalar_logistic_grad(w, b, x, y):
    """Two-class softmax gradient written out with plain floats."""
    logits = [sum(wi * xi for wi, xi in zip(w[c], x)) + b[c] for c in range(2)]
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    p = [v / sum(e) for v in e]
    gw = [[(p[c] - (1.0 if c == y else 0.0)) * xi for xi in x] for c in range(2)]
    gb = [p[c] - (1.0 if c == y else 0.0) for c in range(2)]
    return gw, gb


def test_logistic_two_samples_replay_oracle():
    x = np.array([[0.5, -1.0, 2.0], [1.5, 0.25, -0.5]])
    y = np.array([1, 0])
    model = SoftmaxRegression(3, 2)
    start = np.linspace(-0.3, 0.4, model.parameter_count)
    conf = cfg(learning_rate=0.2)
    out = local_update(model, start, ClientDataset(x, y, 1), conf, np.random.default_rng(42))

    order = np.random.default_rng(42).permutation(2)
    w = [list(start[0:3]), list(start[3:6])]
    b = list(start[6:8])
    for i in order:
        gw, gb = _scalar_logistic_grad(w, b, list(x[i]), int(y[i]))
        w = [[w[c][j] - 0.2 * gw[c][j] for j in range(3)] for c in range(2)]
        b = [b[c] - 0.2 * gb[c] for c in range(2)]
    np.testing.assert_allclose(out, w[0] + w[1] + b, atol=1e-14)


def test_local_update_short_last_batch_and_errors():
    data = ClientDataset(np.ones((5, 2)), np.zeros(5), 1)
    out = local_update(Quadratic(2), np.zeros(2), data, cfg(minibatch_size=2), np.random.default_rng(0))
    # three minibatches of means 1: w <- w - 0.1 (w - 1)
    np.testing.assert_allclose(out, [1 - 0.9**3] * 2, atol=1e-15)
    with pytest.raises(ValueError):
        local_update(Quadratic(3), np.zeros(2), data, cfg(), np.random.default_rng(0))


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="nonempty"):
        ClientDataset(np.zeros((0, 2)), np.zeros(0), 1)


# --- aggregate ------------------------------------------------------------


def test_aggregate_examples():
    v = np.array([1.5, -2.0])
    np.testing.assert_array_equal(aggregate([v]), v)
    np.testing.assert_array_equal(aggregate([v, -v]), [0.0, 0.0])
    np.testing.assert_array_equal(aggregate([[1, 2], [3, 4], [5, 6]]), [3.0, 4.0])


def test_aggregate_errors():
    with pytest.raises(ValueError, match="mismatch"):
        aggregate([np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        aggregate([])


# --- run_round ------------------------------------------------------------


def _clients(xs):
    return [ClientDataset(np.atleast_2d(x), np.zeros(1), k + 1) for k, x in enumerate(xs)]


def _rngs(n, seed=0):
    return [rngs.stream(seed, "shuffle", k) for k in range(n)]


def test_round_with_constant_loss_changes_nothing():
    w = np.array([0.2, 0.7])
    rec = run_round(1, Flat(2), w, _clients([[1.0, 1.0], [2.0, 2.0]]), cfg(), _rngs(2))
    np.testing.assert_array_equal(rec.deltas, np.zeros((2, 2)))
    np.testing.assert_array_equal(rec.aggregated, w)


def test_symmetric_quadratic_round_closed_form():
    a = np.array([3.0, -1.0])
    w = np.array([0.5, 2.0])
    rec = run_round(1, Quadratic(2), w, _clients([a, -a]), cfg(learning_rate=0.25), _rngs(2))
    # w_k = w - eta (w -/+ a); the +/- a terms cancel in the mean
    np.testing.assert_allclose(rec.aggregated, (1 - 0.25) * w, atol=1e-15)
    np.testing.assert_allclose(rec.local_params[0], w - 0.25 * (w - a))


def test_model_poison_hook_adds_exactly_the_noise():
    spec = AttackSpec(kind="model_poison", target_client=2, start_round=3, noise_param=0.01, noise_param_kind="std")
    attacker = Attacker(spec, seed=7, n_classes=2, stream_prefix=("rep", 0))
    model = Quadratic(4)
    w = np.ones(4)
    clients = _clients([np.zeros(4), np.full(4, 2.0)])
    before = run_round(2, model, w, clients, cfg(), _rngs(2), attack=attacker)
    np.testing.assert_array_equal(before.transmitted, before.local_params)
    rec = run_round(3, model, w, clients, cfg(), _rngs(2), attack=attacker)
    np.testing.assert_array_equal(rec.transmitted[0], rec.local_params[0])
    noise = 0.01 * rngs.stream(7, "rep", 0, "attack", "params", 3).standard_normal(4)
    np.testing.assert_array_equal(rec.transmitted[1], rec.local_params[1] + noise)
    np.testing.assert_allclose(rec.aggregated, rec.transmitted.mean(axis=0), rtol=1e-10)


def test_exclusion_drops_client_from_mean_only():
    rec = run_round(1, Quadratic(1), np.zeros(1), _clients([[1.0], [3.0]]), cfg(learning_rate=1.0), _rngs(2), exclude=(2,))
    assert rec.included == (1,)
    np.testing.assert_array_equal(rec.transmitted[:, 0], [1.0, 3.0])
    np.testing.assert_array_equal(rec.aggregated, [1.0])


def test_round_index_starts_at_one():
    with pytest.raises(ValueError):
        run_round(0, Flat(1), np.zeros(1), _clients([[0.0], [0.0]]), cfg(), _rngs(2))


def test_identical_clients_give_identical_deltas():
    g = np.random.default_rng(3)
    x, y = g.standard_normal((16, 3)), g.integers(0, 2, 16)
    clients = [ClientDataset(x, y, k) for k in (1, 2, 3)]
    model = SoftmaxRegression(3, 2)
    rec = run_round(1, model, np.zeros(model.parameter_count), clients, cfg(minibatch_size=4), [rngs.stream(1, "same") for _ in range(3)])
    assert np.array_equal(rec.deltas[0], rec.deltas[1]) and np.array_equal(rec.deltas[1], rec.deltas[2])


def _train(seed, rounds=50, resample=False):
    pop = GaussianMixture(6, 3, 1.5, rngs.stream(seed, "population"))
    data = ClientData(3, 64, seed, population=pop, resample=resample)
    model = SoftmaxRegression(6, 3)
    conf = TrainingConfig(learning_rate=0.05, epochs_per_round=1, minibatch_size=16, rounds=rounds, client_count=3)
    w = model.init_params(None)
    pooled_x = np.vstack([c.features for c in data.round(1)])
    pooled_y = np.concatenate([c.labels for c in data.round(1)])
    losses, records = [], []
    for t in range(1, rounds + 1):
        rec = run_round(t, model, w, data.round(t), conf, [rngs.stream(seed, "shuffle", k, t) for k in range(3)])
        records.append(rec)
        w = rec.aggregated
        losses.append(model.loss(w, pooled_x, pooled_y))
    return np.array(losses), records


def test_training_loss_trends_down():
    losses, records = _train(0)
    slope = np.polyfit(np.arange(losses.size), losses, 1)[0]
    assert slope < 0
    assert losses[-10:].mean() < losses[:10].mean()
    for rec in records:
        np.testing.assert_allclose(rec.aggregated, rec.transmitted.mean(axis=0), rtol=1e-10, atol=1e-15)


def test_rounds_are_bit_reproducible():
    a = _train(4, rounds=5, resample=True)[1]
    b = _train(4, rounds=5, resample=True)[1]
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.transmitted, rb.transmitted) and np.array_equal(ra.aggregated, rb.aggregated)


# --- data -----------------------------------------------------------------


def test_partition_even_split():
    x = np.arange(20.0).reshape(10, 2)
    parts = make_iid_partition(x, np.arange(10), 5, np.random.default_rng(0))
    assert [len(p) for p in parts] == [2] * 5
    assert [p.client_id for p in parts] == [1, 2, 3, 4, 5]
    assert sorted(np.concatenate([p.labels for p in parts])) == list(range(10))


def test_partition_drops_remainder():
    parts = make_iid_partition(np.zeros((11, 1)), np.arange(11), 5, np.random.default_rng(0))
    labels = np.concatenate([p.labels for p in parts])
    assert [len(p) for p in parts] == [2] * 5 and len(set(labels)) == 10


def test_partition_is_deterministic():
    x, y = np.zeros((30, 1)), np.arange(30)
    a = make_iid_partition(x, y, 4, np.random.default_rng(9))
    b = make_iid_partition(x, y, 4, np.random.default_rng(9))
    assert all(np.array_equal(p.labels, q.labels) for p, q in zip(a, b))


def test_partition_too_many_clients():
    with pytest.raises(ValueError):
        make_iid_partition(np.zeros((3, 1)), np.arange(3), 4, np.random.default_rng(0))


def test_client_data_modes():
    pop = GaussianMixture(3, 2, 1.0, np.random.default_rng(0))
    fixed = ClientData(2, 5, 1, population=pop)
    assert fixed.round(1) is fixed.round(9)
    fresh = ClientData(2, 5, 1, population=pop, resample=True)
    assert not np.array_equal(fresh.round(1)[0].features, fresh.round(2)[0].features)
    assert np.array_equal(fresh.round(3)[1].features, ClientData(2, 5, 1, population=pop, resample=True).round(3)[1].features)
    pool = (np.arange(40.0).reshape(20, 2), np.arange(20) % 2)
    pooled = ClientData(2, 4, 1, pool=pool, resample=True)
    assert [len(c) for c in pooled.round(1)] == [4, 4]
    with pytest.raises(ValueError):
        ClientData(4, 6, 1, pool=pool)


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainingConfig(client_count=1)
    with pytest.raises(ConfigError):
        TrainingConfig(minibatch_size=0)
