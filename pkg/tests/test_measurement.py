import math

import numpy as np
import pytest

from hamid.bloch import DecoherenceRates, HamiltonianParams, propagate
from hamid.measurement import (
    ExperimentConfig,
    TimeSeries,
    combine_error_rates,
    outcome_probabilities,
    point_rng,
    sample_aux_experiment,
    sample_experiment,
)

H_EXAMPLE = HamiltonianParams(1.0, 1.0)
DEPHASING = DecoherenceRates(0.1)


def test_config_invariants():
    cfg = ExperimentConfig(dt=0.015, n_t=1000, n_e=50)
    assert cfg.n_total == 50_000
    assert cfg.t_ob == pytest.approx(15.0)
    assert len(cfg.times) == 1000
    assert cfg.with_seed(9).seed == 9


@pytest.mark.parametrize("kwargs", [
    dict(dt=0.0, n_t=10, n_e=1),
    dict(dt=0.1, n_t=1, n_e=1),
    dict(dt=0.1, n_t=10, n_e=0),
    dict(dt=0.1, n_t=10, n_e=1, eta=0.5),
    dict(dt=0.1, n_t=10, n_e=1, init_z=0),
    dict(dt=0.1, n_t=10, n_e=1, seed=-1),
    dict(dt=0.1, n_t=10, n_e=1, aux_interval="random"),
])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        ExperimentConfig(**kwargs)


def test_no_dynamics_gives_all_up():
    ts = sample_experiment(HamiltonianParams(1.0, 0.0), DecoherenceRates(),
                           ExperimentConfig(dt=0.1, n_t=50, n_e=20, seed=3))
    np.testing.assert_array_equal(ts.z_mean, 1.0)
    np.testing.assert_array_equal(ts.up_counts, 20)


def test_error_scales_expected_signal():
    ts = sample_experiment(HamiltonianParams(1.0, 0.0), DecoherenceRates(),
                           ExperimentConfig(dt=0.1, n_t=20, n_e=50, eta=0.1), noiseless=True)
    np.testing.assert_allclose(ts.z_mean, 0.8, atol=1e-15)


def test_counts_and_means_are_consistent():
    cfg = ExperimentConfig(dt=0.015, n_t=1000, n_e=50, seed=4)
    ts = sample_experiment(H_EXAMPLE, DEPHASING, cfg)
    np.testing.assert_array_equal(ts.z_mean, 2.0 * ts.up_counts / 50 - 1.0)
    assert np.all(np.abs(ts.z_mean) <= 1.0)
    assert np.all(ts.up_counts == np.round(ts.up_counts))


def test_scatter_matches_binomial_variance():
    cfg = ExperimentConfig(dt=0.015, n_t=1000, n_e=50, seed=5)
    ts = sample_experiment(H_EXAMPLE, DEPHASING, cfg)
    z = propagate(H_EXAMPLE, DEPHASING, (0, 0, 1), cfg.dt, cfg.n_t)[:, 2]
    sd = np.sqrt(np.maximum(1 - z**2, 1e-12) / cfg.n_e)
    pulls = (ts.z_mean - z) / sd
    assert abs(pulls.mean()) < 0.15
    assert 0.9 < pulls.std() < 1.1


def test_seed_determinism():
    cfg = ExperimentConfig(dt=0.05, n_t=100, n_e=30, seed=123)
    a = sample_experiment(H_EXAMPLE, DEPHASING, cfg)
    b = sample_experiment(H_EXAMPLE, DEPHASING, cfg)
    np.testing.assert_array_equal(a.up_counts, b.up_counts)
    c = sample_experiment(H_EXAMPLE, DEPHASING, cfg.with_seed(124))
    assert not np.array_equal(a.up_counts, c.up_counts)


def test_point_streams_do_not_depend_on_order():
    forward = [point_rng(7, k).random() for k in range(5)]
    backward = [point_rng(7, k).random() for k in reversed(range(5))][::-1]
    assert forward == backward
    assert point_rng(7, 0, tag=0).random() != point_rng(7, 0, tag=1).random()


def test_unbiased_over_seeds():
    eta = 0.1
    base = ExperimentConfig(dt=0.3, n_t=20, n_e=10, eta=eta)
    z = propagate(H_EXAMPLE, DEPHASING, (0, 0, 1), base.dt, base.n_t)[:, 2]
    n_seeds = 1000
    runs = np.array([sample_experiment(H_EXAMPLE, DEPHASING, base.with_seed(s)).z_mean
                     for s in range(n_seeds)])
    expected = (1 - 2 * eta) * z
    se = np.sqrt((1 - expected**2) / base.n_e / n_seeds)
    assert np.all(np.abs(runs.mean(axis=0) - expected) <= 5 * se)


def test_projection_noise_variance():
    cfg = ExperimentConfig(dt=0.1, n_t=4, n_e=40, eta=0.2)
    h = HamiltonianParams(1.0, 0.0)  # z stays at 1 so the mean is 0.6 at every point
    runs = np.array([sample_experiment(h, DecoherenceRates(), cfg.with_seed(s)).z_mean
                     for s in range(1000)])
    zbar = 0.6
    np.testing.assert_allclose(runs.var(axis=0, ddof=1), (1 - zbar**2) / cfg.n_e, rtol=0.2)


def test_error_location_equivalence():
    rng = np.random.default_rng(2)
    for _ in range(50):
        h = HamiltonianParams(rng.uniform(0, 3), rng.uniform(0, math.pi))
        rates = DecoherenceRates(rng.uniform(0, 0.5))
        cfg = ExperimentConfig(dt=0.05, n_t=200, n_e=10, eta=rng.uniform(0, 0.49))
        post = outcome_probabilities(h, rates, cfg, "post")
        pre = outcome_probabilities(h, rates, cfg, "pre")
        np.testing.assert_allclose(pre, post, atol=1e-12)


def test_combined_error_rate():
    assert combine_error_rates(0.1, 0.0) == 0.1
    assert combine_error_rates(0.1, 0.2) == pytest.approx(0.1 * 0.8 + 0.2 * 0.9)
    # two flips compose: 1 - 2 eta_eff = (1 - 2 eta1)(1 - 2 eta2)
    assert 1 - 2 * combine_error_rates(0.1, 0.2) == pytest.approx(0.8 * 0.6)


def test_timeseries_validation_and_binned_counts():
    with pytest.raises(ValueError):
        TimeSeries([0.0], [1.0], [1.0], 1)
    ts = TimeSeries.from_counts([0.0, 1.0, 2.0], [3, 0, 0], [4, 2, 0])
    np.testing.assert_allclose(ts.z_mean[:2], [0.5, -1.0])
    assert math.isnan(ts.z_mean[2])


def test_aux_without_relaxation_is_constant():
    cfg = ExperimentConfig(dt=0.05, n_t=40, n_e=100, seed=1)
    z1, zm1 = sample_aux_experiment(DecoherenceRates(), cfg)
    np.testing.assert_array_equal(z1.z_mean, 1.0)
    np.testing.assert_array_equal(zm1.z_mean, -1.0)
    np.testing.assert_array_equal(z1.times, zm1.times)


def test_aux_branches_follow_relaxation():
    rates = DecoherenceRates(0.0, 1.0, 5.0)
    cfg = ExperimentConfig(dt=0.01, n_t=150, n_e=20_000, seed=8)
    z1, zm1 = sample_aux_experiment(rates, cfg)
    t = cfg.times
    diff = z1.z_mean - zm1.z_mean
    se = np.sqrt(z1.projection_variance() + zm1.projection_variance())
    assert np.all(np.abs(diff - 2 * np.exp(-6 * t)) <= 5 * se)
    late = slice(120, None)
    assert np.all(np.abs(z1.z_mean[late] + 2 / 3) <= 5 * np.sqrt(z1.projection_variance()[late]))
    assert np.all(np.abs(zm1.z_mean[late] + 2 / 3) <= 5 * np.sqrt(zm1.projection_variance()[late]))


def test_aux_noiseless_is_exact():
    rates = DecoherenceRates(0.0, 1.0, 5.0)
    cfg = ExperimentConfig(dt=0.01, n_t=100, n_e=10)
    z1, zm1 = sample_aux_experiment(rates, cfg, noiseless=True)
    t = cfg.times
    np.testing.assert_allclose(z1.z_mean, -2 / 3 + (5 / 3) * np.exp(-6 * t), atol=1e-14)
    np.testing.assert_allclose(zm1.z_mean, -2 / 3 - (1 / 3) * np.exp(-6 * t), atol=1e-14)
    with pytest.raises(ValueError):
        sample_aux_experiment(rates, ExperimentConfig(dt=0.01, n_t=10, n_e=10, eta=0.1),
                              noiseless=True)


def test_aux_requires_undriven_or_aligned_hamiltonian():
    cfg = ExperimentConfig(dt=0.01, n_t=10, n_e=10)
    with pytest.raises(ValueError):
        sample_aux_experiment(DecoherenceRates(0, 1, 1), cfg, HamiltonianParams(1.0, 0.5))
    z1, _ = sample_aux_experiment(DecoherenceRates(0, 1, 1), cfg, HamiltonianParams(1.0, 0.0))
    assert len(z1) == 10


def test_aux_growing_interval_mode():
    rates = DecoherenceRates(0.0, 1.0, 5.0)
    cfg = ExperimentConfig(dt=0.002, n_t=300, n_e=4000, seed=2, aux_interval="growing")
    z1, zm1 = sample_aux_experiment(rates, cfg)
    total = z1.n_e + zm1.n_e
    np.testing.assert_array_equal(total, cfg.n_e)
    ok = (z1.n_e > 50) & (zm1.n_e > 50)
    diff = (z1.z_mean - zm1.z_mean)[ok]
    se = np.sqrt(z1.projection_variance() + zm1.projection_variance())[ok]
    assert np.all(np.abs(diff - 2 * np.exp(-6 * cfg.times[ok])) <= 5 * se)


def test_aux_with_readout_error_reduces_contrast():
    # with zero wait a wrong label comes from the other chain's state, so each
    # branch reads (1 - 2 eta) times the labelled contrast (1 - 2 eta)
    eta = 0.05
    cfg = ExperimentConfig(dt=0.01, n_t=5, n_e=40_000, eta=eta, seed=4)
    z1, zm1 = sample_aux_experiment(DecoherenceRates(0.0, 1.0, 5.0), cfg)
    se = math.sqrt(z1.projection_variance()[0] + zm1.projection_variance()[0])
    assert abs(z1.z_mean[0] - zm1.z_mean[0] - 2 * (1 - 2 * eta) ** 2) <= 5 * se
