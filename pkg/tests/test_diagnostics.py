"""Convergence diagnostic tests with Monte Carlo and closed-form oracles."""

import numpy as np
import pytest

from povmap.diagnostics import diagnose, ess, mcse, rhat


def test_rhat_constant_chains_flagged():
    chains = np.ones((4, 100))
    assert np.isinf(rhat(chains))


def test_rhat_iid_chains_near_one():
    # Monte Carlo oracle: 4 chains x 5000 iid normal draws over 50 seeds.
    for seed in range(50):
        chains = np.random.default_rng(seed).standard_normal((4, 5000))
        value = rhat(chains)
        assert 0.999 <= value <= 1.01


def test_rhat_detects_offset_chains():
    rng = np.random.default_rng(3)
    chains = rng.standard_normal((2, 2000))
    chains[1] += 5.0
    # between-chain variance dominates: (n-1)/n + B/(n W) with B ~ n*12.5
    assert rhat(chains) > 1.5


def test_rhat_needs_two_chains_and_four_draws():
    with pytest.raises(ValueError):
        rhat(np.ones((1, 100)))
    with pytest.raises(ValueError):
        rhat(np.ones((2, 3)))


def test_ess_iid_draws_near_total():
    rng = np.random.default_rng(7)
    chains = rng.standard_normal((4, 5000))
    value = ess(chains)
    assert 0.8 * 20_000 <= value <= 1.2 * 20_000


def test_ess_ar1_matches_theory():
    # AR(1) with coefficient 0.9 has autocorrelation time (1+rho)/(1-rho),
    # so ESS should be near total * (1-0.9)/(1+0.9).
    rho = 0.9
    rng = np.random.default_rng(11)
    chains = np.empty((4, 20_000))
    for c in range(4):
        noise = rng.standard_normal(20_000)
        x = np.empty(20_000)
        x[0] = noise[0] / np.sqrt(1 - rho**2)
        for t in range(1, 20_000):
            x[t] = rho * x[t - 1] + noise[t]
        chains[c] = x
    expected = chains.size * (1 - rho) / (1 + rho)
    assert ess(chains) == pytest.approx(expected, rel=0.25)


def test_ess_constant_chain_flagged():
    assert np.isnan(ess(np.ones((4, 100))))


def test_ess_capped_at_twice_total():
    # strongly antithetic draws cannot report more than 2x the total
    rng = np.random.default_rng(13)
    base = rng.standard_normal((4, 1000))
    anti = base.copy()
    anti[:, 1::2] = -base[:, 0::2] + 1e-8 * rng.standard_normal((4, 500))
    assert ess(anti) <= 2.0 * anti.size + 1e-9


def test_mcse_identity_from_report():
    rng = np.random.default_rng(17)
    values = rng.standard_normal((4, 2000, 3))
    report = diagnose(values)
    for j in range(3):
        chains = values[:, :, j]
        sd = chains.ravel().std(ddof=1)
        assert report.mcse[j] == pytest.approx(sd / np.sqrt(report.ess[j]), rel=1e-12)
        assert report.mcse[j] == pytest.approx(mcse(chains), rel=1e-12)


def test_affine_invariance():
    rng = np.random.default_rng(19)
    chains = rng.standard_normal((4, 3000))
    transformed = 3.7 * chains - 11.0
    assert rhat(chains) == pytest.approx(rhat(transformed), abs=1e-10)
    assert ess(chains) == pytest.approx(ess(transformed), rel=1e-10)


def test_diagnose_shapes_and_names():
    rng = np.random.default_rng(23)
    report = diagnose(rng.standard_normal((2, 500, 2)), ["a", "b"])
    assert report.parameter_names == ["a", "b"]
    assert report.rhat.shape == report.ess.shape == report.mcse.shape == (2,)
    assert report.worst_rhat() < 1.05