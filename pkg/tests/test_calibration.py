from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from fedrr.calibration import (
    BLOCK_ROUNDS,
    CalibrationConfig,
    estimate_arl,
    find_limit,
    score_block,
    search_limit,
    simulate_run_lengths,
)
from fedrr.errors import CalibrationError, ConfigError
from fedrr.monitor import CusumBank, cusum_step


def test_limit_zero_alarms_almost_immediately():
    est = estimate_arl(0.0, K=5, d=0.5, M=2000)
    assert 1.0 <= est.mean <= 2.0
    assert est.censored == 0


def test_arl_increases_across_the_reference_limits():
    arls = [estimate_arl(H, 5, 0.4, M=2000, rng_seed=1).mean for H in (2.77, 3.28, 3.84)]
    assert arls[0] < arls[1] < arls[2]


def test_run_lengths_pathwise_monotone_in_H():
    grid = [0.5, 1.5, 2.5, 3.5, 4.5]
    runs = [simulate_run_lengths(H, 4, 0.5, 600, rng_seed=3)[0] for H in grid]
    for shorter, longer in zip(runs, runs[1:]):
        assert np.all(shorter <= longer)


def test_estimate_is_deterministic():
    a = estimate_arl(3.0, 5, 0.5, M=700, rng_seed=9)
    b = estimate_arl(3.0, 5, 0.5, M=700, rng_seed=9)
    assert a == b
    assert estimate_arl(3.0, 5, 0.5, M=700, rng_seed=10).mean != a.mean


def test_standard_error_is_sample_std_over_root_m():
    lengths, _ = simulate_run_lengths(2.0, 5, 0.5, 900, rng_seed=2)
    est = estimate_arl(2.0, 5, 0.5, M=900, rng_seed=2)
    assert est.std_error == pytest.approx(lengths.std(ddof=1) / 30.0, rel=1e-12)


def test_parallel_and_serial_agree_exactly():
    serial = simulate_run_lengths(2.5, 5, 0.5, 700, rng_seed=4)[0]
    parallel = simulate_run_lengths(2.5, 5, 0.5, 700, rng_seed=4, workers=2)[0]
    np.testing.assert_array_equal(serial, parallel)


def test_score_block_rows_are_permutation_scores():
    z = score_block(0, 0, 0, 50, 4)
    assert z.shape == (BLOCK_ROUNDS, 50, 4)
    bands = np.floor(4 * stats.norm.cdf(z)).astype(int)
    # each client falls in a distinct quarter band: the ranks form a permutation
    assert np.all(np.sort(bands, axis=2) == np.arange(4))


def test_vectorised_chart_matches_cusum_step():
    """Replay one replication's scores through the scalar monitor code."""
    K, d, H = 5, 0.5, 2.0
    lengths, _ = simulate_run_lengths(H, K, d, 3, rng_seed=5)
    z = score_block(5, 0, 0, 3, K)
    for m in range(3):
        if lengths[m] > BLOCK_ROUNDS:
            continue
        bank = CusumBank.start(K, d, H)
        for t in range(BLOCK_ROUNDS):
            bank, dec = cusum_step(bank, z[t, m])
            if dec.alarmed:
                assert lengths[m] == t + 1
                break


def test_censoring_warns_and_is_counted():
    with pytest.warns(RuntimeWarning, match="max_rounds"):
        est = estimate_arl(50.0, 3, 0.5, M=10, max_rounds=30)
    assert est.censored == 10 and est.mean == 30.0 and est.censored_fraction == 1.0


def test_find_limit_hits_its_own_target():
    cfg = CalibrationConfig(K=5, d=0.5, arl0=20, replications=3000, rng_seed=6)
    res = search_limit(cfg)
    assert abs(res.estimate.mean - 20) <= max(2.5 * res.estimate.std_error, 0.5)
    assert res.record()["H"] == res.H and res.record()["M"] == 3000
    assert find_limit(cfg) == res.H


def test_small_target_gives_small_limit():
    H = find_limit(CalibrationConfig(K=5, d=0.5, arl0=1.05, replications=2000))
    assert 0.0 <= H <= 1.0


def test_bracket_expands_upwards():
    cfg = CalibrationConfig(K=3, d=0.5, arl0=60, replications=500, h_lo=0.0, h_hi=0.25)
    res = search_limit(cfg)
    assert res.H > 0.25


def test_censoring_during_search_fails_loudly():
    cfg = CalibrationConfig(K=5, d=0.5, arl0=30, replications=300, max_rounds=20, h_hi=4.0)
    with pytest.raises(CalibrationError):
        search_limit(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        CalibrationConfig(arl0=1.0)
    with pytest.raises(ConfigError):
        CalibrationConfig(h_lo=2.0, h_hi=1.0)
    with pytest.raises(ConfigError):
        CalibrationConfig(replications=0)
    with pytest.raises(ConfigError):
        CalibrationConfig(K=1)
