"""Synthetic worlds: users, items and outside options for the three scenarios.

Users get ``a[0] = b[0] = 1``; every later coordinate pair ``(a_l, b_l)`` is
bivariate normal with variances 2.5 and covariance -1. Items and outside
options draw their first (universal) coordinates from a bivariate normal with
variances 10 and covariance -1 and their remaining coordinates from N(0, 1).
Outside options differ from items only in the mean of the first coordinates,
which the scenario sets.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .core import IdentityRating, OptionKind, OptionProfile, UserProfile, World
from .errors import ConfigurationError


class Scenario(str, Enum):
    ENRICHING = "enriching"
    TEMPTING = "tempting"
    SIMILAR = "similar"


# mean of (x_1, y_1) for outside options
OUTSIDE_MEANS = {
    Scenario.ENRICHING: (-5.0, 35.0 / 3.0),
    Scenario.TEMPTING: (15.0, -10.0),
    Scenario.SIMILAR: (10.0, 0.0),
}

ITEM_MEAN = (10.0, 0.0)
FIRST_COMPONENT_COV = ((10.0, -1.0), (-1.0, 10.0))
USER_COMPONENT_COV = ((2.5, -1.0), (-1.0, 2.5))
LAMBDA_C_BETA = (12.5, 37.5)
LAMBDA_F_BETA = (37.5, 12.5)

# (gamma, delta, xi, lambda) in the order x = xi + lambda * sinh((z - gamma) / delta)
JOHNSON_X = (3.25, 1.0, 12.3520, 0.3933)
JOHNSON_Y = (3.25, 1.0, 2.3520, 0.3933)
JOHNSON_CONVENTION = "(gamma, delta, xi, lambda): xi + lambda * sinh((z - gamma) / delta), z ~ N(0, 1)"


@dataclass
class ScenarioConfig:
    m: int = 1000
    n: int = 250
    K: int = 100
    d: int = 3
    scenario: Scenario = Scenario.ENRICHING
    item_distribution: str = "normal"  # or "johnson"
    johnson_x: tuple = JOHNSON_X
    johnson_y: tuple = JOHNSON_Y
    seed: int = 0

    def __post_init__(self):
        self.scenario = Scenario(self.scenario)
        for name in ("m", "n", "K", "d"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.item_distribution not in ("normal", "johnson"):
            raise ConfigurationError("item_distribution must be 'normal' or 'johnson'")
        self.johnson_x = tuple(float(v) for v in self.johnson_x)
        self.johnson_y = tuple(float(v) for v in self.johnson_y)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scenario"] = self.scenario.value
        out["johnson_x"] = list(self.johnson_x)
        out["johnson_y"] = list(self.johnson_y)
        return out


def johnson_su(params, size, rng: np.random.Generator) -> np.ndarray:
    gamma, delta, xi, lam = params
    if delta <= 0 or lam <= 0:
        raise ConfigurationError("Johnson S_U needs delta > 0 and lambda > 0")
    z = rng.standard_normal(size)
    return xi + lam * np.sinh((z - gamma) / delta)


def _sample_lambdas(m: int, rng: np.random.Generator):
    lam_c = rng.beta(*LAMBDA_C_BETA, size=m)
    lam_f = rng.beta(*LAMBDA_F_BETA, size=m)
    bad = lam_c > lam_f
    while bad.any():
        k = int(bad.sum())
        lam_c[bad] = rng.beta(*LAMBDA_C_BETA, size=k)
        lam_f[bad] = rng.beta(*LAMBDA_F_BETA, size=k)
        bad = lam_c > lam_f
    return lam_c, lam_f


def _user_blocks(config: ScenarioConfig, rng: np.random.Generator):
    m, d = config.m, config.d
    a = np.ones((m, d))
    b = np.ones((m, d))
    if d > 1:
        pairs = rng.multivariate_normal((0.0, 0.0), USER_COMPONENT_COV, size=(m, d - 1))
        a[:, 1:] = pairs[..., 0]
        b[:, 1:] = pairs[..., 1]
    lam_c, lam_f = _sample_lambdas(m, rng)
    return a, b, lam_c, lam_f


def _option_blocks(count: int, d: int, first_mean, rng: np.random.Generator):
    first = rng.multivariate_normal(first_mean, FIRST_COMPONENT_COV, size=count)
    x = np.empty((count, d))
    y = np.empty((count, d))
    x[:, 0] = first[:, 0]
    y[:, 0] = first[:, 1]
    if d > 1:
        x[:, 1:] = rng.standard_normal((count, d - 1))
        y[:, 1:] = rng.standard_normal((count, d - 1))
    return x, y


def _item_blocks(config: ScenarioConfig, rng: np.random.Generator):
    if config.item_distribution == "normal":
        return _option_blocks(config.n, config.d, ITEM_MEAN, rng)
    n, d = config.n, config.d
    x = np.empty((n, d))
    y = np.empty((n, d))
    x[:, 0] = johnson_su(config.johnson_x, n, rng)
    y[:, 0] = johnson_su(config.johnson_y, n, rng)
    if d > 1:
        x[:, 1:] = rng.standard_normal((n, d - 1))
        y[:, 1:] = rng.standard_normal((n, d - 1))
    return x, y


def sample_users(config: ScenarioConfig, rng: np.random.Generator) -> list:
    a, b, lam_c, lam_f = _user_blocks(config, rng)
    return [UserProfile(j, a[j], b[j], float(lam_c[j]), float(lam_f[j])) for j in range(config.m)]


def sample_items(config: ScenarioConfig, rng: np.random.Generator) -> list:
    x, y = _item_blocks(config, rng)
    return [OptionProfile(i, OptionKind.ITEM, x[i], y[i]) for i in range(config.n)]


def sample_items_johnson(config: ScenarioConfig, rng: np.random.Generator) -> list:
    cfg = ScenarioConfig(**{**config.to_dict(), "item_distribution": "johnson"})
    return sample_items(cfg, rng)


def sample_outside_options(config: ScenarioConfig, rng: np.random.Generator) -> list:
    x, y = _option_blocks(config.K, config.d, OUTSIDE_MEANS[config.scenario], rng)
    return [OptionProfile(k, OptionKind.OUTSIDE, x[k], y[k]) for k in range(config.K)]


def make_world(config: ScenarioConfig, rng: Optional[np.random.Generator] = None) -> World:
    """Assemble a world with a uniform availability distribution.

    Users, items and outside options are drawn in that order from ``rng``
    (default: a generator seeded with ``config.seed``).
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    a, b, lam_c, lam_f = _user_blocks(config, rng)
    x, y = _item_blocks(config, rng)
    xo, yo = _option_blocks(config.K, config.d, OUTSIDE_MEANS[config.scenario], rng)
    metadata = {"generator": config.to_dict()}
    if config.item_distribution == "johnson":
        metadata["johnson_convention"] = JOHNSON_CONVENTION
    return World(
        user_a=a, user_b=b, lambda_c=lam_c, lambda_f=lam_f,
        item_x=x, item_y=y, outside_x=xo, outside_y=yo,
        availability=np.full(config.K, 1.0 / config.K),
        seed=config.seed, f_rating=IdentityRating(), metadata=metadata,
    )
