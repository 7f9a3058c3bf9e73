"""Recommendation policies: the locally greedy strategy and the four baselines.

Every policy ranks items with a per-user key. Baselines show the top ``s``
available items. The greedy policy picks the item with the highest expected
single-round enrichment against the outside-option distribution, then pads
the slate with items whose choice score is strictly lower, so the user's
induced choice is the greedy item. When recommending nothing beats every
item (the outside option alone is worth more), the slate is empty.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .core import OptionProfile, UserProfile, World, conditional_enrichment
from .errors import ConfigurationError

DEFAULT_SLATE_SIZE = 15


class PolicyKind(str, Enum):
    GREEDY_PERFECT = "greedy_perfect"
    GREEDY_ESTIMATED = "greedy_estimated"
    PURE_ENRICHMENT = "pure_enrichment"
    PURE_TEMPTATION = "pure_temptation"
    RATINGS_BASED = "ratings_based"
    CLICK_BASED = "click_based"

    @property
    def is_greedy(self) -> bool:
        return self in (PolicyKind.GREEDY_PERFECT, PolicyKind.GREEDY_ESTIMATED)


BASELINES = (
    PolicyKind.PURE_ENRICHMENT,
    PolicyKind.PURE_TEMPTATION,
    PolicyKind.RATINGS_BASED,
    PolicyKind.CLICK_BASED,
)


@dataclass
class OutsideBelief:
    """Normal belief over outside-option choice scores plus known outside enrichment."""

    mu: float
    sigma: float
    expected_outside_enrichment: np.ndarray

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        self.expected_outside_enrichment = np.asarray(self.expected_outside_enrichment, dtype=float)


# ---------------------------------------------------------------------------
# expected single-round enrichment


def expected_enrichment_perfect(user: UserProfile, item: OptionProfile, world: World) -> float:
    return float(sum(
        p * conditional_enrichment(user, item, world.outside_option(k))
        for k, p in enumerate(world.availability)
    ))


def expected_enrichment_matrix(world: World, chunk: int = 64) -> np.ndarray:
    """Exact expected conditional enrichment for every (user, item) pair."""
    out = np.empty((world.n_users, world.n_items))
    p = world.availability
    for lo in range(0, world.n_users, chunk):
        hi = min(lo + chunk, world.n_users)
        c = world.item_choice[lo:hi, :, None]
        u = world.item_enrichment[lo:hi, :, None]
        co = world.outside_choice[lo:hi, None, :]
        uo = world.outside_enrichment[lo:hi, None, :]
        out[lo:hi] = np.where(c >= co, u, uo) @ p
    return out


def choice_probability(choice, mu: float, sigma: float):
    """P(item beats a N(mu, sigma^2) outside score) for estimated choice score(s)."""
    if not sigma > 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    return ndtr((np.asarray(choice, dtype=float) - mu) / sigma)


def expected_enrichment_estimated(u_hat, c_hat, belief: OutsideBelief, outside_enrichment=None):
    """Closed-form expected enrichment under the normal outside-score belief.

    ``u_hat`` and ``c_hat`` may be scalars or arrays of matching shape;
    ``outside_enrichment`` defaults to the belief's per-user vector and must
    broadcast against them.
    """
    if outside_enrichment is None:
        outside_enrichment = belief.expected_outside_enrichment
    prob = choice_probability(c_hat, belief.mu, belief.sigma)
    return prob * np.asarray(u_hat, dtype=float) + (1.0 - prob) * outside_enrichment


# ---------------------------------------------------------------------------
# slates


def _order(key: np.ndarray) -> np.ndarray:
    # descending, ties to the lowest index
    return np.argsort(-key, axis=-1, kind="stable")


def top_slate(key, available, slate_size: int) -> np.ndarray:
    key = np.asarray(key, dtype=float)
    available = np.asarray(available, dtype=bool)
    masked = np.where(available, key, -np.inf)
    order = _order(masked)[:slate_size]
    return order[available[order]]


def greedy_recommend(expected, choice, available, slate_size: int = DEFAULT_SLATE_SIZE,
                     outside_value: Optional[float] = None) -> np.ndarray:
    """Locally greedy slate for one user.

    Parameters
    ----------
    expected : array (n,)
        Expected single-round enrichment of recommending each item alone.
    choice : array (n,)
        Choice scores (true or estimated) used to keep fill items below the pick.
    available : bool array (n,)
        Items not yet consumed.
    outside_value : float, optional
        Expected enrichment of recommending nothing. When it strictly exceeds
        every item's value, the empty slate is returned.
    """
    expected = np.asarray(expected, dtype=float)
    choice = np.asarray(choice, dtype=float)
    available = np.asarray(available, dtype=bool)
    if not available.any():
        return np.zeros(0, dtype=np.int64)
    masked = np.where(available, expected, -np.inf)
    best = int(np.argmax(masked))
    if outside_value is not None and outside_value > masked[best]:
        return np.zeros(0, dtype=np.int64)
    fill = available & (choice < choice[best])
    rest = top_slate(expected, fill, slate_size - 1)
    return np.concatenate(([best], rest)).astype(np.int64)


def baseline_recommend(kind: PolicyKind, key, available, slate_size: int = DEFAULT_SLATE_SIZE) -> np.ndarray:
    """Top-``slate_size`` available items by the baseline's ranking key.

    ``key`` is the per-item quantity the baseline ranks by at the caller's
    information level: enrichment, temptation, feedback score / predicted
    rating, or choice score / predicted click score.
    """
    if PolicyKind(kind).is_greedy:
        raise ConfigurationError("baseline_recommend only handles baseline policies")
    return top_slate(key, available, slate_size)


def batch_top_slates(key: np.ndarray, available: np.ndarray, slate_size: int) -> np.ndarray:
    """Row-wise ``top_slate`` for all users, padded with -1."""
    masked = np.where(available, key, -np.inf)
    order = _order(masked)[:, :slate_size]
    keep = np.take_along_axis(available, order, axis=1)
    return np.where(keep, order, -1)


def batch_greedy_slates(expected: np.ndarray, choice: np.ndarray, available: np.ndarray,
                        slate_size: int, outside_value: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise ``greedy_recommend`` for all users, padded with -1."""
    m = expected.shape[0]
    rows = np.arange(m)
    masked = np.where(available, expected, -np.inf)
    best = np.argmax(masked, axis=1)
    best_value = masked[rows, best]
    empty = ~available.any(axis=1)
    if outside_value is not None:
        empty |= outside_value > best_value
    fill = available & (choice < choice[rows, best][:, None])
    rest = batch_top_slates(expected, fill, slate_size - 1)
    slates = np.concatenate((best[:, None], rest), axis=1)
    slates[empty] = -1
    return slates


# ---------------------------------------------------------------------------
# policy inputs


@dataclass
class PolicyInputs:
    """Per-user matrices a policy needs to build slates each round.

    ``key`` is the ranking key (expected enrichment for greedy policies);
    ``choice`` and ``outside_value`` are used only by greedy policies.
    """

    kind: PolicyKind
    key: np.ndarray
    choice: Optional[np.ndarray] = None
    outside_value: Optional[np.ndarray] = None

    def slates(self, available: np.ndarray, slate_size: int) -> np.ndarray:
        if self.kind.is_greedy:
            return batch_greedy_slates(self.key, self.choice, available, slate_size, self.outside_value)
        return batch_top_slates(self.key, available, slate_size)


def perfect_inputs(kind: PolicyKind, world: World) -> PolicyInputs:
    """Policy inputs from ground truth."""
    kind = PolicyKind(kind)
    if kind.is_greedy:
        return PolicyInputs(kind, expected_enrichment_matrix(world), world.item_choice,
                            world.expected_outside_enrichment())
    key = {
        PolicyKind.PURE_ENRICHMENT: world.item_enrichment,
        PolicyKind.PURE_TEMPTATION: world.item_temptation,
        PolicyKind.RATINGS_BASED: world.item_feedback,
        PolicyKind.CLICK_BASED: world.item_choice,
    }[kind]
    return PolicyInputs(kind, key)


def greedy_inputs_from_estimates(u_hat: np.ndarray, c_hat: np.ndarray, belief: OutsideBelief,
                                 kind: PolicyKind = PolicyKind.GREEDY_ESTIMATED) -> PolicyInputs:
    eo = belief.expected_outside_enrichment
    expected = expected_enrichment_estimated(u_hat, c_hat, belief, eo[:, None])
    return PolicyInputs(PolicyKind(kind), expected, c_hat, eo)

