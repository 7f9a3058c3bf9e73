import math

import numpy as np
import pytest
from scipy import stats

import oracles
from enrichrec.errors import ConfigurationError
from enrichrec.synthgen import (JOHNSON_X, JOHNSON_Y, LAMBDA_C_BETA, LAMBDA_F_BETA, OUTSIDE_MEANS,
                                Scenario, ScenarioConfig, johnson_su, make_world, sample_items,
                                sample_items_johnson, sample_outside_options, sample_users)


def test_default_sizes():
    cfg = ScenarioConfig()
    assert (cfg.m, cfg.n, cfg.K, cfg.d) == (1000, 250, 100, 3)


def test_lambda_c_prior_mode():
    assert oracles.beta_mode(*LAMBDA_C_BETA) == pytest.approx(0.2396, abs=1e-4)
    assert oracles.beta_mode(*LAMBDA_F_BETA) == pytest.approx(1 - 0.2396, abs=1e-4)


def test_users_are_anchored_and_ordered():
    users = sample_users(ScenarioConfig(m=500, d=3), np.random.default_rng(0))
    assert all(u.a[0] == 1.0 and u.b[0] == 1.0 for u in users)
    assert all(u.lambda_c <= u.lambda_f for u in users)


def test_outside_first_component_means():
    cfg = ScenarioConfig(K=4000, scenario="tempting")
    opts = sample_outside_options(cfg, np.random.default_rng(1))
    x1 = np.array([o.x[0] for o in opts])
    y1 = np.array([o.y[0] for o in opts])
    se = math.sqrt(10.0 / 4000)
    assert abs(x1.mean() - 15.0) < 5 * se and abs(y1.mean() + 10.0) < 5 * se
    assert OUTSIDE_MEANS[Scenario.ENRICHING] == (-5.0, 35.0 / 3.0)


def test_metadata_echoes_generator_parameters():
    cfg = ScenarioConfig(m=3, n=4, K=2, seed=7, scenario="similar", item_distribution="johnson")
    w = make_world(cfg)
    assert w.metadata["generator"] == cfg.to_dict()
    assert w.metadata["generator"]["johnson_x"] == list(JOHNSON_X)
    assert "johnson_convention" in w.metadata
    assert w.seed == 7


def test_same_seed_gives_bitwise_identical_world():
    cfg = ScenarioConfig(m=20, n=15, K=6, seed=11)
    w1, w2 = make_world(cfg), make_world(cfg)
    for name in ("user_a", "user_b", "lambda_c", "lambda_f", "item_x", "item_y", "outside_x", "outside_y"):
        assert np.array_equal(getattr(w1, name), getattr(w2, name))
    w3 = make_world(ScenarioConfig(m=20, n=15, K=6, seed=12))
    assert not np.array_equal(w1.item_x, w3.item_x)


def test_availability_is_uniform():
    w = make_world(ScenarioConfig(m=2, n=3, K=8))
    assert np.allclose(w.availability, 1 / 8)


def test_invalid_configs():
    with pytest.raises(ConfigurationError):
        ScenarioConfig(m=0)
    with pytest.raises(ConfigurationError):
        ScenarioConfig(item_distribution="cauchy")
    with pytest.raises(ValueError):
        ScenarioConfig(scenario="bogus")
    with pytest.raises(ConfigurationError):
        johnson_su((0.0, -1.0, 0.0, 1.0), 5, np.random.default_rng(0))


def _johnson_cdf(params):
    gamma, delta, xi, lam = params
    return lambda x: stats.norm.cdf(gamma + delta * np.arcsinh((np.asarray(x) - xi) / lam))


@pytest.mark.parametrize("params", [JOHNSON_X, JOHNSON_Y])
def test_johnson_draws_follow_their_distribution(params):
    draws = johnson_su(params, 20000, np.random.default_rng(3))
    assert stats.kstest(draws, _johnson_cdf(params)).pvalue > 1e-3
    mean, var, skew = oracles.johnson_su_moments(*params)
    assert abs(draws.mean() - mean) < 5 * math.sqrt(var / draws.size)
    assert skew < 0  # gamma > 0 gives a left tail
    assert stats.skew(draws) < 0


def test_johnson_items_keep_normal_minor_components():
    items = sample_items_johnson(ScenarioConfig(n=3000), np.random.default_rng(5))
    x2 = np.array([it.x[1] for it in items])
    assert abs(x2.mean()) < 5 / math.sqrt(3000)
    assert x2.var() == pytest.approx(1.0, abs=0.1)


def test_normal_items_first_component_covariance():
    items = sample_items(ScenarioConfig(n=10000), np.random.default_rng(6))
    xy = np.array([[it.x[0], it.y[0]] for it in items])
    cov = np.cov(xy.T)
    assert cov[0, 1] == pytest.approx(-1.0, abs=5 * math.sqrt((100 + 1) / 10000))
