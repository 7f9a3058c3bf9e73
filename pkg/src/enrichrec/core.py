"""Ground-truth behavioral model: scores, choice process, ratings, rounds.

A user holds an enrichment vector ``a`` and a temptation vector ``b`` (both
anchored with a leading 1), plus a choice weight ``lambda_c`` and a feedback
weight ``lambda_f``. An option (on-platform item or outside option) holds
``x`` and ``y``. Enrichment is ``a @ x``, temptation is ``b @ y``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, InvalidRoundError

OUTSIDE = -1
"""Marker stored in ``chosen`` when the user took the outside option."""


class OptionKind(str, Enum):
    ITEM = "item"
    OUTSIDE = "outside"


def _vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size < 1:
        raise ConfigurationError(f"{name} must be a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} has non-finite components")
    return arr


@dataclass(frozen=True, eq=False)
class UserProfile:
    user_id: int
    a: np.ndarray
    b: np.ndarray
    lambda_c: float
    lambda_f: float

    def __post_init__(self):
        a = _vector(self.a, "a")
        b = _vector(self.b, "b")
        if a.shape != b.shape:
            raise ConfigurationError("a and b must share the latent dimension")
        if a[0] != 1.0 or b[0] != 1.0:
            raise ConfigurationError("first components of a and b must equal 1")
        if not (0.0 <= self.lambda_c <= 1.0 and 0.0 <= self.lambda_f <= 1.0):
            raise ConfigurationError("lambda_c and lambda_f must lie in [0, 1]")
        if self.lambda_f < self.lambda_c:
            raise ConfigurationError("lambda_f must be >= lambda_c")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.a.size


@dataclass(frozen=True, eq=False)
class OptionProfile:
    option_id: int
    kind: OptionKind
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = _vector(self.x, "x")
        y = _vector(self.y, "y")
        if x.shape != y.shape:
            raise ConfigurationError("x and y must share the latent dimension")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "kind", OptionKind(self.kind))

    @property
    def dim(self) -> int:
        return self.x.size


# ---------------------------------------------------------------------------
# scores


def mix(weight, enrichment, temptation):
    """``weight * enrichment + (1 - weight) * temptation``; broadcasts over arrays."""
    return weight * enrichment + (1.0 - weight) * temptation


def _dot(left: np.ndarray, right: np.ndarray) -> float:
    if left.shape != right.shape:
        raise ConfigurationError(
            f"dimension mismatch: user has d={left.size}, option has d={right.size}"
        )
    return float(left @ right)


def enrichment(user: UserProfile, option: OptionProfile) -> float:
    return _dot(user.a, option.x)


def temptation(user: UserProfile, option: OptionProfile) -> float:
    return _dot(user.b, option.y)


def choice_score(user: UserProfile, option: OptionProfile) -> float:
    return mix(user.lambda_c, enrichment(user, option), temptation(user, option))


def feedback_score(user: UserProfile, option: OptionProfile) -> float:
    return mix(user.lambda_f, enrichment(user, option), temptation(user, option))


# ---------------------------------------------------------------------------
# rating maps


class RatingMap:
    """Monotone non-decreasing map from feedback score to rating."""

    name = "abstract"

    def __call__(self, score):
        raise NotImplementedError

    def derivative(self, score):
        raise NotImplementedError

    def inverse(self, rating):
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"name": self.name}


class IdentityRating(RatingMap):
    name = "identity"

    def __call__(self, score):
        return score

    def derivative(self, score):
        return np.ones_like(np.asarray(score, dtype=float))

    def inverse(self, rating):
        return rating


class AffineClampRating(RatingMap):
    """Affine map sending ``[score_low, score_high]`` onto ``[rating_low, rating_high]``.

    Scores beyond the knots are clamped to the end of the star scale, so the
    map is invertible only on the open interior of the rating range.
    """

    name = "affine_clamp"

    def __init__(self, score_low: float = -10.0, score_high: float = 20.0,
                 rating_low: float = 0.5, rating_high: float = 5.0):
        if not score_high > score_low or not rating_high > rating_low:
            raise ConfigurationError("affine rating knots must be increasing")
        self.score_low = float(score_low)
        self.score_high = float(score_high)
        self.rating_low = float(rating_low)
        self.rating_high = float(rating_high)
        self._slope = (self.rating_high - self.rating_low) / (self.score_high - self.score_low)

    def __call__(self, score):
        raw = self.rating_low + self._slope * (np.asarray(score, dtype=float) - self.score_low)
        out = np.clip(raw, self.rating_low, self.rating_high)
        return float(out) if out.ndim == 0 else out

    def derivative(self, score):
        s = np.asarray(score, dtype=float)
        inside = (s > self.score_low) & (s < self.score_high)
        return np.where(inside, self._slope, 0.0)

    def inverse(self, rating):
        r = np.asarray(rating, dtype=float)
        if np.any((r <= self.rating_low) | (r >= self.rating_high)):
            raise ConfigurationError("clamped ratings cannot be inverted")
        out = self.score_low + (r - self.rating_low) / self._slope
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "score_low": self.score_low,
            "score_high": self.score_high,
            "rating_low": self.rating_low,
            "rating_high": self.rating_high,
        }


def rating_map_from_dict(spec: dict) -> RatingMap:
    name = spec.get("name", "identity")
    if name == "identity":
        return IdentityRating()
    if name == "affine_clamp":
        return AffineClampRating(spec["score_low"], spec["score_high"],
                                 spec["rating_low"], spec["rating_high"])
    raise ConfigurationError(f"unknown rating map {name!r}")


def emit_rating(user: UserProfile, item: OptionProfile, f_rating: Optional[RatingMap] = None) -> float:
    f_rating = f_rating or IdentityRating()
    return float(f_rating(feedback_score(user, item)))


# ---------------------------------------------------------------------------
# choice


def select_consumption(user: UserProfile, slate: Sequence[OptionProfile],
                       outside: Optional[OptionProfile]) -> OptionProfile:
    """Return the option with the highest choice score.

    Ties between items go to the lowest ``option_id``; a tie between the best
    item and the outside option goes to the item.
    """
    if not slate and outside is None:
        raise InvalidRoundError("nothing to choose: empty slate and no outside option")
    best = None
    best_score = -math.inf
    for option in sorted(slate, key=lambda o: o.option_id):
        score = choice_score(user, option)
        if score > best_score:
            best, best_score = option, score
    if outside is not None and (best is None or choice_score(user, outside) > best_score):
        return outside
    return best


def conditional_enrichment(user: UserProfile, item: OptionProfile, outside: OptionProfile) -> float:
    if choice_score(user, item) >= choice_score(user, outside):
        return enrichment(user, item)
    return enrichment(user, outside)


# ---------------------------------------------------------------------------
# world state


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    round: int
    slate: tuple
    chosen: int
    rating: Optional[float] = None
    outside_index: Optional[int] = None

    def __post_init__(self):
        if self.chosen != OUTSIDE and self.chosen not in self.slate:
            raise ContractViolation("chosen item is not part of the slate")
        if self.rating is not None and self.chosen == OUTSIDE:
            raise ContractViolation("ratings are only emitted for on-platform items")


@dataclass
class World:
    """Full ground truth for one simulated platform.

    Latent blocks are stored as matrices (one row per entity) so that whole
    score matrices can be produced with a single product; ``users``, ``items``
    and ``outside_pool`` give the per-entity profile view.
    """

    user_a: np.ndarray
    user_b: np.ndarray
    lambda_c: np.ndarray
    lambda_f: np.ndarray
    item_x: np.ndarray
    item_y: np.ndarray
    outside_x: np.ndarray
    outside_y: np.ndarray
    availability: Optional[np.ndarray] = None
    consumed: list = None
    round: int = 0
    seed: Optional[int] = None
    f_rating: RatingMap = field(default_factory=IdentityRating)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("user_a", "user_b", "item_x", "item_y", "outside_x", "outside_y"):
            arr = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"{name} has non-finite entries")
            setattr(self, name, arr)
        self.lambda_c = np.asarray(self.lambda_c, dtype=float).reshape(-1)
        self.lambda_f = np.asarray(self.lambda_f, dtype=float).reshape(-1)
        m, d = self.user_a.shape
        shapes = {
            "user_b": (m, d),
            "item_y": self.item_x.shape,
            "outside_y": self.outside_x.shape,
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.item_x.shape[1] != d or self.outside_x.shape[1] != d:
            raise ConfigurationError("items, outside options and users must share dimension d")
        if self.lambda_c.shape != (m,) or self.lambda_f.shape != (m,):
            raise ConfigurationError("one lambda_c and lambda_f per user required")
        if np.any(self.user_a[:, 0] != 1.0) or np.any(self.user_b[:, 0] != 1.0):
            raise ConfigurationError("first components of user vectors must equal 1")
        if np.any(self.lambda_f < self.lambda_c):
            raise ConfigurationError("lambda_f must be >= lambda_c for every user")
        K = self.outside_x.shape[0]
        if self.availability is None:
            self.availability = np.full(K, 1.0 / K)
        self.availability = np.asarray(self.availability, dtype=float)
        if (self.availability.shape != (K,) or np.any(self.availability < 0)
                or abs(self.availability.sum() - 1.0) > 1e-12):
            raise ConfigurationError("availability must be a probability vector over the outside pool")
        if self.consumed is None:
            self.consumed = [set() for _ in range(m)]
        elif len(self.consumed) != m:
            raise ConfigurationError("one consumed set per user required")
        n = self.item_x.shape[0]
        for s in self.consumed:
            if any(not 0 <= i < n for i in s):
                raise ConfigurationError("consumed sets may only hold on-platform item ids")

    # sizes
    @property
    def n_users(self) -> int:
        return self.user_a.shape[0]

    @property
    def n_items(self) -> int:
        return self.item_x.shape[0]

    @property
    def n_outside(self) -> int:
        return self.outside_x.shape[0]

    @property
    def dim(self) -> int:
        return self.user_a.shape[1]

    # profile views
    def user(self, j: int) -> UserProfile:
        return UserProfile(j, self.user_a[j], self.user_b[j],
                           float(self.lambda_c[j]), float(self.lambda_f[j]))

    def item(self, i: int) -> OptionProfile:
        return OptionProfile(i, OptionKind.ITEM, self.item_x[i], self.item_y[i])

    def outside_option(self, k: int) -> OptionProfile:
        return OptionProfile(k, OptionKind.OUTSIDE, self.outside_x[k], self.outside_y[k])

    @property
    def users(self) -> list:
        return [self.user(j) for j in range(self.n_users)]

    @property
    def items(self) -> list:
        return [self.item(i) for i in range(self.n_items)]

    @property
    def outside_pool(self) -> list:
        return [self.outside_option(k) for k in range(self.n_outside)]

    # score matrices (users x options); latent blocks never change after construction
    @cached_property
    def item_enrichment(self) -> np.ndarray:
        return self.user_a @ self.item_x.T

    @cached_property
    def item_temptation(self) -> np.ndarray:
        return self.user_b @ self.item_y.T

    @cached_property
    def item_choice(self) -> np.ndarray:
        return mix(self.lambda_c[:, None], self.item_enrichment, self.item_temptation)

    @cached_property
    def item_feedback(self) -> np.ndarray:
        return mix(self.lambda_f[:, None], self.item_enrichment, self.item_temptation)

    @cached_property
    def outside_enrichment(self) -> np.ndarray:
        return self.user_a @ self.outside_x.T

    @cached_property
    def outside_temptation(self) -> np.ndarray:
        return self.user_b @ self.outside_y.T

    @cached_property
    def outside_choice(self) -> np.ndarray:
        return mix(self.lambda_c[:, None], self.outside_enrichment, self.outside_temptation)

    def expected_outside_enrichment(self) -> np.ndarray:
        """Availability-weighted mean enrichment of the outside pool, per user."""
        return self.outside_enrichment @ self.availability

    def consumed_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_users, self.n_items), dtype=bool)
        for j, s in enumerate(self.consumed):
            if s:
                mask[j, list(s)] = True
        return mask

    def fork(self) -> "World":
        """Independent copy: mutable state is duplicated, latent blocks are shared read-only."""
        clone = copy.copy(self)
        clone.consumed = [set(s) for s in self.consumed]
        clone.metadata = copy.deepcopy(self.metadata)
        return clone

    def sample_outside(self, rng: np.random.Generator, size=None):
        return rng.choice(self.n_outside, size=size, p=self.availability)

    def draw_outside(self, rng: np.random.Generator, rounds: int):
        """Outside draws for every user over ``rounds`` rounds.

        Returns ``(index, choice, enrichment)``, each of shape (users, rounds).
        """
        idx = self.sample_outside(rng, size=(self.n_users, rounds))
        rows = np.arange(self.n_users)[:, None]
        return idx, self.outside_choice[rows, idx], self.outside_enrichment[rows, idx]

    def outside_enrichment_of(self, users: np.ndarray, outside_index: np.ndarray) -> np.ndarray:
        return self.outside_enrichment[users, outside_index]


def step_round(world: World, user_id: int, slate: Sequence[int], rng: np.random.Generator,
               outside_index: Optional[int] = None, emit_ratings: bool = True) -> InteractionRecord:
    """Play one consumption round for one user and update the consumed set.

    The outside option is drawn from ``world.availability`` unless
    ``outside_index`` pins it. ``world.round`` is left alone; the harness
    owns the round counter.
    """
    consumed = world.consumed[user_id]
    slate = tuple(int(i) for i in slate)
    if len(set(slate)) != len(slate):
        raise ContractViolation("slate contains duplicate items")
    stale = consumed.intersection(slate)
    if stale:
        raise ContractViolation(f"slate contains items already consumed by user {user_id}: {sorted(stale)}")
    if outside_index is None:
        outside_index = int(world.sample_outside(rng))
    user = world.user(user_id)
    picked = select_consumption(user, [world.item(i) for i in slate], world.outside_option(outside_index))
    if picked.kind is OptionKind.OUTSIDE:
        return InteractionRecord(user_id, world.round, slate, OUTSIDE, None, outside_index)
    consumed.add(picked.option_id)
    rating = emit_rating(user, picked, world.f_rating) if emit_ratings else None
    return InteractionRecord(user_id, world.round, slate, picked.option_id, rating, outside_index)


# ---------------------------------------------------------------------------
# logs


@dataclass
class InteractionLog:
    """Columnar store of interaction records.

    ``slates`` is padded with -1 to a common width. ``outside`` holds the
    ground-truth index of the sampled outside option (-1 when unknown, as in
    MovieLens); estimators never read it.
    """

    user: np.ndarray
    round: np.ndarray
    slates: np.ndarray
    chosen: np.ndarray
    rating: np.ndarray
    outside: np.ndarray

    def __post_init__(self):
        self.user = np.asarray(self.user, dtype=np.int64).reshape(-1)
        R = self.user.size
        self.round = np.asarray(self.round, dtype=np.int64).reshape(R)
        slates = np.asarray(self.slates, dtype=np.int64)
        self.slates = slates.reshape(R, -1) if R else slates.reshape(0, slates.shape[-1] if slates.ndim == 2 else 0)
        self.chosen = np.asarray(self.chosen, dtype=np.int64).reshape(R)
        self.rating = np.asarray(self.rating, dtype=float).reshape(R)
        self.outside = np.asarray(self.outside, dtype=np.int64).reshape(R)

    def __len__(self) -> int:
        return self.user.size

    @classmethod
    def empty(cls, width: int = 0) -> "InteractionLog":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros((0, width), dtype=np.int64), z, np.zeros(0), z)

    @classmethod
    def from_records(cls, records: Iterable[InteractionRecord], width: Optional[int] = None) -> "InteractionLog":
        records = list(records)
        if width is None:
            width = max((len(r.slate) for r in records), default=0)
        slates = np.full((len(records), width), -1, dtype=np.int64)
        for k, r in enumerate(records):
            slates[k, :len(r.slate)] = r.slate
        return cls(
            [r.user_id for r in records],
            [r.round for r in records],
            slates,
            [r.chosen for r in records],
            [np.nan if r.rating is None else r.rating for r in records],
            [-1 if r.outside_index is None else r.outside_index for r in records],
        )

    @classmethod
    def concat(cls, logs: Sequence["InteractionLog"]) -> "InteractionLog":
        logs = [log for log in logs if log is not None]
        if not logs:
            return cls.empty()
        width = max(log.slates.shape[1] for log in logs)
        slates = []
        for log in logs:
            pad = np.full((len(log), width), -1, dtype=np.int64)
            pad[:, :log.slates.shape[1]] = log.slates
            slates.append(pad)
        return cls(
            np.concatenate([log.user for log in logs]),
            np.concatenate([log.round for log in logs]),
            np.concatenate(slates) if slates else np.zeros((0, width)),
            np.concatenate([log.chosen for log in logs]),
            np.concatenate([log.rating for log in logs]),
            np.concatenate([log.outside for log in logs]),
        )

    def select(self, mask) -> "InteractionLog":
        mask = np.asarray(mask)
        return InteractionLog(self.user[mask], self.round[mask], self.slates[mask],
                              self.chosen[mask], self.rating[mask], self.outside[mask])

    def records(self) -> Iterator[InteractionRecord]:
        for k in range(len(self)):
            slate = tuple(int(i) for i in self.slates[k] if i >= 0)
            rating = None if np.isnan(self.rating[k]) else float(self.rating[k])
            outside = None if self.outside[k] < 0 else int(self.outside[k])
            yield InteractionRecord(int(self.user[k]), int(self.round[k]), slate,
                                    int(self.chosen[k]), rating, outside)

    @property
    def on_platform(self) -> np.ndarray:
        return self.chosen != OUTSIDE

    def ratings(self) -> list:
        """``(user, item, rating)`` triples for rated on-platform choices."""
        keep = self.on_platform & ~np.isnan(self.rating)
        return list(zip(self.user[keep].tolist(), self.chosen[keep].tolist(), self.rating[keep].tolist()))

    def to_dict(self) -> dict:
        return {
            "user": self.user.tolist(),
            "round": self.round.tolist(),
            "slates": self.slates.tolist(),
            "chosen": self.chosen.tolist(),
            "rating": [None if np.isnan(r) else float(r) for r in self.rating],
            "outside": self.outside.tolist(),
            "width": int(self.slates.shape[1]),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "InteractionLog":
        rating = [np.nan if r is None else r for r in data["rating"]]
        slates = np.asarray(data["slates"], dtype=np.int64).reshape(len(rating), data.get("width", 0))
        return cls(data["user"], data["round"], slates, data["chosen"], rating, data["outside"])

