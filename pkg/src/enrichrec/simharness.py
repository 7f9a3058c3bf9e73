"""Experiment protocol: warm-up, policy rounds, replications, metrics.

An *environment* is anything exposing the per-user score matrices
``item_enrichment``, ``item_temptation``, ``item_choice`` and
``item_feedback``, a ``consumed`` list of sets, an ``f_rating`` map and the
``draw_outside`` / ``outside_enrichment_of`` / ``expected_outside_enrichment``
hooks. :class:`~enrichrec.core.World` is one; the MovieLens sandbox world is
another.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .core import OUTSIDE, InteractionLog, World
from .errors import ConfigurationError, ContractViolation, ProtocolError, SizeError
from .estimation import Dataset, RatingFactorization, TrainConfig, fit
from .policies import (BASELINES, DEFAULT_SLATE_SIZE, PolicyInputs, PolicyKind,
                       expected_enrichment_matrix, greedy_inputs_from_estimates,
                       perfect_inputs)
from .synthgen import ScenarioConfig, make_world

_logger = logging.getLogger(__name__)


class InfoLevel(str, Enum):
    PERFECT = "perfect"
    PARTIAL = "partial"


ALL_PERFECT = (PolicyKind.GREEDY_PERFECT,) + BASELINES
ALL_PARTIAL = (PolicyKind.GREEDY_ESTIMATED,) + BASELINES


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    total_rounds: int = 75
    warmup_rounds: int = 25
    policy_rounds: int = 50
    slate_size: int = DEFAULT_SLATE_SIZE
    replications: int = 5
    policies: Optional[Sequence[PolicyKind]] = None
    info_level: InfoLevel = InfoLevel.PERFECT
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    histogram_bins: int = 20

    def __post_init__(self):
        self.info_level = InfoLevel(self.info_level)
        if self.warmup_rounds + self.policy_rounds != self.total_rounds:
            raise ConfigurationError("warmup_rounds + policy_rounds must equal total_rounds")
        if self.slate_size < 1 or self.replications < 1 or self.policy_rounds < 1:
            raise ConfigurationError("slate_size, replications and policy_rounds must be positive")
        if self.policies is None:
            self.policies = ALL_PERFECT if self.info_level is InfoLevel.PERFECT else ALL_PARTIAL
        self.policies = tuple(PolicyKind(p) for p in self.policies)
        if self.info_level is InfoLevel.PERFECT and PolicyKind.GREEDY_ESTIMATED in self.policies:
            raise ConfigurationError("greedy_estimated needs partial information")
        if self.info_level is InfoLevel.PARTIAL and PolicyKind.GREEDY_PERFECT in self.policies:
            raise ConfigurationError("greedy_perfect needs perfect information")

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "total_rounds": self.total_rounds,
            "warmup_rounds": self.warmup_rounds,
            "policy_rounds": self.policy_rounds,
            "slate_size": self.slate_size,
            "replications": self.replications,
            "policies": [p.value for p in self.policies],
            "info_level": self.info_level.value,
            "seed": self.seed,
            "train": asdict(self.train),
            "histogram_bins": self.histogram_bins,
        }


# ---------------------------------------------------------------------------
# rounds


def _consumed_mask(env) -> np.ndarray:
    m, n = env.item_choice.shape
    mask = np.zeros((m, n), dtype=bool)
    for j, s in enumerate(env.consumed):
        if s:
            mask[j, list(s)] = True
    return mask


def play_round(env, slates: np.ndarray, outside_index: np.ndarray, outside_choice: np.ndarray,
               round_no: int, consumed: Optional[np.ndarray] = None, emit_ratings: bool = True) -> InteractionLog:
    """Every user picks from their slate plus their drawn outside option.

    Same rule as :func:`enrichrec.core.select_consumption`, vectorised over
    users: highest choice score wins, ties among items go to the lowest item
    id, and an item beats the outside option on a tie. ``consumed`` (bool
    users x items) is updated in place together with ``env.consumed``.
    """
    m = slates.shape[0]
    rows = np.arange(m)
    if consumed is None:
        consumed = _consumed_mask(env)
    valid = slates >= 0
    idx = np.where(valid, slates, 0)
    if np.any(valid & consumed[rows[:, None], idx]):
        bad = int(np.flatnonzero((valid & consumed[rows[:, None], idx]).any(axis=1))[0])
        raise ContractViolation(f"slate for user {bad} contains an already consumed item")
    c = np.where(valid, env.item_choice[rows[:, None], idx], -np.inf)
    best = c.max(axis=1) if slates.shape[1] else np.full(m, -np.inf)
    tied = valid & (c == best[:, None])
    big = np.iinfo(np.int64).max
    best_item = np.where(tied, slates, big).min(axis=1) if slates.shape[1] else np.full(m, big)
    takes_item = valid.any(axis=1) & (best >= outside_choice)
    chosen = np.where(takes_item, best_item, OUTSIDE)
    picked = rows[takes_item]
    consumed[picked, chosen[takes_item]] = True
    for j, i in zip(picked.tolist(), chosen[takes_item].tolist()):
        env.consumed[j].add(i)
    rating = np.full(m, np.nan)
    if emit_ratings and picked.size:
        rating[takes_item] = env.f_rating(env.item_feedback[picked, chosen[takes_item]])
    return InteractionLog(rows, np.full(m, round_no), slates, chosen, rating, outside_index)


def random_slates(available: np.ndarray, slate_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random slates of non-consumed items, padded with -1."""
    keys = rng.random(available.shape)
    masked = np.where(available, keys, -1.0)
    order = np.argsort(-masked, axis=1, kind="stable")[:, :slate_size]
    return np.where(np.take_along_axis(available, order, axis=1), order, -1)


def run_warmup(env, rng: np.random.Generator, rounds: int = 25, slate_size: int = DEFAULT_SLATE_SIZE,
               start_round: int = 0) -> InteractionLog:
    consumed = _consumed_mask(env)
    logs = []
    o_idx, o_c, _ = env.draw_outside(rng, rounds)
    for t in range(rounds):
        slates = random_slates(~consumed, slate_size, rng)
        logs.append(play_round(env, slates, o_idx[:, t], o_c[:, t], start_round + t, consumed))
    return InteractionLog.concat(logs)


def run_policy_rounds(env, inputs: PolicyInputs, rng: Optional[np.random.Generator] = None,
                      rounds: int = 50, slate_size: int = DEFAULT_SLATE_SIZE, start_round: int = 25,
                      outside_draws=None) -> InteractionLog:
    """Play ``rounds`` rounds with slates from ``inputs``.

    Pass ``outside_draws`` (``draw_outside`` output) to share the outside
    availability sequence across policies; otherwise it is drawn from ``rng``.
    """
    if outside_draws is None:
        if rng is None:
            raise ConfigurationError("need rng or outside_draws")
        outside_draws = env.draw_outside(rng, rounds)
    o_idx, o_c, _ = outside_draws
    consumed = _consumed_mask(env)
    logs = []
    for t in range(rounds):
        slates = inputs.slates(~consumed, slate_size)
        logs.append(play_round(env, slates, o_idx[:, t], o_c[:, t], start_round + t, consumed))
    return InteractionLog.concat(logs)


# ---------------------------------------------------------------------------
# metrics


def consumed_enrichment(log: InteractionLog, env) -> np.ndarray:
    """True enrichment of what was consumed in each log row."""
    item = log.chosen != OUTSIDE
    out = np.empty(len(log))
    out[item] = env.item_enrichment[log.user[item], log.chosen[item]]
    out[~item] = env.outside_enrichment_of(log.user[~item], log.outside[~item])
    return out


def overall_individual_enrichment(log: InteractionLog, env, n_users: Optional[int] = None) -> float:
    """Mean over users of the total enrichment consumed in ``log``.

    Pass only the post-warm-up rows. Users are averaged over the whole
    population (``n_users``, default all users of ``env``).
    """
    if len(log) == 0:
        raise ProtocolError("overall individual enrichment needs a non-empty policy-round log")
    n_users = n_users or env.item_enrichment.shape[0]
    per_user = np.bincount(log.user, weights=consumed_enrichment(log, env), minlength=n_users)
    return float(per_user.mean())


@dataclass
class Histogram:
    counts: np.ndarray
    u_edges: np.ndarray
    v_edges: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def rows(self):
        for a in range(self.counts.shape[0]):
            for b in range(self.counts.shape[1]):
                yield (float(self.u_edges[a]), float(self.u_edges[a + 1]),
                       float(self.v_edges[b]), float(self.v_edges[b + 1]), int(self.counts[a, b]))


def consumed_pairs(log: InteractionLog, env) -> np.ndarray:
    """``(u, v)`` of every consumed on-platform item in the log, shape (k, 2)."""
    item = log.chosen != OUTSIDE
    j, i = log.user[item], log.chosen[item]
    return np.column_stack((env.item_enrichment[j, i], env.item_temptation[j, i]))


def consumption_frequency(log: InteractionLog, env, bins=20, value_range=None) -> Histogram:
    """2-D histogram of enrichment vs temptation of consumed on-platform items."""
    pairs = consumed_pairs(log, env)
    if value_range is None:
        if pairs.size:
            lo = pairs.min(axis=0)
            hi = pairs.max(axis=0)
            hi = np.where(hi > lo, hi, lo + 1.0)
            value_range = [(lo[0], hi[0]), (lo[1], hi[1])]
        else:
            value_range = [(0.0, 1.0), (0.0, 1.0)]
    counts, ue, ve = np.histogram2d(pairs[:, 0], pairs[:, 1], bins=bins, range=value_range)
    return Histogram(counts.astype(np.int64), ue, ve)


# ---------------------------------------------------------------------------
# partial-information fits


@dataclass
class PartialFits:
    """Models fitted once on the warm-up data, then frozen."""

    joint: object  # EstimatedModel, alpha from config
    clicks: object  # EstimatedModel, alpha = 0
    ratings: RatingFactorization


def fit_partial(env, warmup: InteractionLog, train: TrainConfig, expected_outside_enrichment) -> PartialFits:
    m, n = env.item_choice.shape
    dataset = Dataset.from_log(warmup, m, n)
    joint = fit(dataset, train, expected_outside_enrichment, env.f_rating)
    click_cfg = TrainConfig(**{**asdict(train), "alpha": 0.0})
    clicks = fit(dataset, click_cfg, expected_outside_enrichment, env.f_rating)
    ratings = RatingFactorization.fit(dataset.rating_user, dataset.rating_item, dataset.rating_value,
                                      m, n, latent_dim=train.latent_dim, seed=train.seed,
                                      learning_rate=train.learning_rate, minibatch_size=train.minibatch_size)
    return PartialFits(joint, clicks, ratings)


def partial_inputs(kind: PolicyKind, fits: PartialFits) -> PolicyInputs:
    kind = PolicyKind(kind)
    model = fits.joint
    if kind is PolicyKind.GREEDY_ESTIMATED:
        return greedy_inputs_from_estimates(model.u_hat(), model.choice_scores(), model.belief())
    if kind is PolicyKind.PURE_ENRICHMENT:
        return PolicyInputs(kind, model.u_hat())
    if kind is PolicyKind.PURE_TEMPTATION:
        return PolicyInputs(kind, model.v_hat())
    if kind is PolicyKind.RATINGS_BASED:
        return PolicyInputs(kind, fits.ratings.predict())
    if kind is PolicyKind.CLICK_BASED:
        return PolicyInputs(kind, fits.clicks.choice_scores())
    raise ConfigurationError(f"{kind.value} is not available with partial information")


# ---------------------------------------------------------------------------
# replications


@dataclass
class PolicyRun:
    policy: PolicyKind
    replication: int
    enrichment: float
    pairs: np.ndarray
    on_platform: int
    log: Optional[InteractionLog] = None
    world: Optional[object] = None


@dataclass
class MetricsReport:
    config: dict
    runs: list
    histograms: dict
    runtime_seconds: float
    metadata: dict = field(default_factory=dict)

    def policies(self) -> list:
        seen = []
        for r in self.runs:
            if r.policy not in seen:
                seen.append(r.policy)
        return seen

    def values(self, policy) -> np.ndarray:
        policy = PolicyKind(policy)
        runs = sorted((r for r in self.runs if r.policy is policy), key=lambda r: r.replication)
        return np.array([r.enrichment for r in runs])

    def mean(self, policy) -> float:
        return float(self.values(policy).mean())

    def std(self, policy) -> float:
        v = self.values(policy)
        return float(v.std(ddof=1)) if v.size > 1 else 0.0

    def consumed_means(self, policy) -> tuple:
        """Mean (enrichment, temptation) of consumed on-platform items."""
        policy = PolicyKind(policy)
        pairs = np.concatenate([r.pairs for r in self.runs if r.policy is policy] or [np.zeros((0, 2))])
        if not len(pairs):
            return float("nan"), float("nan")
        return float(pairs[:, 0].mean()), float(pairs[:, 1].mean())

    def wins(self, policy, against) -> int:
        """Replications in which ``policy`` strictly beats ``against``."""
        return int(np.sum(self.values(policy) > self.values(against)))

    def summary(self) -> dict:
        return {
            p.value: {
                "mean": self.mean(p),
                "std": self.std(p),
                "per_replication": self.values(p).tolist(),
                "consumed_mean_enrichment": self.consumed_means(p)[0],
                "consumed_mean_temptation": self.consumed_means(p)[1],
            }
            for p in self.policies()
        }

    def long_rows(self, scenario: str, info_level: str):
        for r in sorted(self.runs, key=lambda r: (r.replication, r.policy.value)):
            yield (scenario, info_level, r.policy.value, r.replication, "overall_individual_enrichment", r.enrichment)
            yield (scenario, info_level, r.policy.value, r.replication, "on_platform_consumptions", r.on_platform)


def _seed_seq(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *[int(k) for k in keys]])


# substream keys
_WORLD, _WARMUP, _POLICY = 0, 1, 2


def run_replication(config: ExperimentConfig, replication: int, keep_logs: bool = False,
                    world: Optional[World] = None) -> list:
    """One full protocol run: a fresh world, a shared warm-up, every policy."""
    rng_world = np.random.default_rng(_seed_seq(config.seed, replication, _WORLD))
    if world is None:
        world = make_world(config.scenario, rng_world)
        world.seed = config.seed
        world.metadata["replication"] = replication
    warm = run_warmup(world, np.random.default_rng(_seed_seq(config.seed, replication, _WARMUP)),
                      config.warmup_rounds, config.slate_size)
    world.round = config.warmup_rounds
    draws = world.draw_outside(np.random.default_rng(_seed_seq(config.seed, replication, _POLICY)),
                               config.policy_rounds)
    fits = None
    if config.info_level is InfoLevel.PARTIAL:
        train = TrainConfig(**{**asdict(config.train), "seed": config.train.seed + replication})
        fits = fit_partial(world, warm, train, world.expected_outside_enrichment())
    runs = []
    for kind in config.policies:
        branch = world.fork()
        inputs = perfect_inputs(kind, branch) if fits is None else partial_inputs(kind, fits)
        log = run_policy_rounds(branch, inputs, rounds=config.policy_rounds, slate_size=config.slate_size,
                                start_round=config.warmup_rounds, outside_draws=draws)
        runs.append(PolicyRun(
            policy=kind, replication=replication,
            enrichment=overall_individual_enrichment(log, branch),
            pairs=consumed_pairs(log, branch),
            on_platform=int(np.sum(log.chosen != OUTSIDE)),
            log=InteractionLog.concat([warm, log]) if keep_logs else None,
            world=branch if keep_logs else None,
        ))
    return runs


def histograms_for(runs: Sequence[PolicyRun], bins: int = 20) -> dict:
    pooled = np.concatenate([r.pairs for r in runs] or [np.zeros((0, 2))])
    if len(pooled):
        lo, hi = pooled.min(axis=0), pooled.max(axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        value_range = [(lo[0], hi[0]), (lo[1], hi[1])]
    else:
        value_range = [(0.0, 1.0), (0.0, 1.0)]
    out = {}
    for kind in dict.fromkeys(r.policy for r in runs):
        pairs = np.concatenate([r.pairs for r in runs if r.policy is kind] or [np.zeros((0, 2))])
        counts, ue, ve = np.histogram2d(pairs[:, 0], pairs[:, 1], bins=bins, range=value_range)
        out[kind] = Histogram(counts.astype(np.int64), ue, ve)
    return out


def replicate(config: ExperimentConfig, keep_logs: bool = False) -> MetricsReport:
    """Run every replication (fresh world each) and aggregate."""
    start = time.perf_counter()
    runs = []
    for rep in range(config.replications):
        runs.extend(run_replication(config, rep, keep_logs))
        _logger.info("replication %d/%d done", rep + 1, config.replications)
    return MetricsReport(
        config=config.to_dict(),
        runs=runs,
        histograms=histograms_for(runs, config.histogram_bins),
        runtime_seconds=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# exhaustive policy-tree oracle for tiny single-user worlds

ORACLE_LIMITS = {"n_items": 5, "n_outside": 3, "rounds": 4}


def _tiny_user_terms(world: World, rounds: int):
    if world.n_users != 1:
        raise SizeError(f"oracle handles a single user, got {world.n_users}")
    sizes = {"n_items": world.n_items, "n_outside": world.n_outside, "rounds": rounds}
    for name, value in sizes.items():
        if value > ORACLE_LIMITS[name]:
            raise SizeError(f"{name}={value} exceeds the oracle limit {ORACLE_LIMITS[name]}")
    if rounds < 0:
        raise ConfigurationError("rounds must be non-negative")
    value = expected_enrichment_matrix(world)[0]
    chosen = (world.item_choice[0][:, None] >= world.outside_choice[0][None, :]) @ world.availability
    outside = float(world.expected_outside_enrichment()[0])
    return value, chosen, outside, frozenset(world.consumed[0])


def brute_force_optimal(world: World, rounds: int) -> float:
    """Best expected total enrichment over every adaptive recommendation policy.

    Each node of a policy tree recommends one available item or nothing and
    branches on whether the item was consumed. Because outside draws are
    independent across rounds, a node's future only depends on the consumed
    set and the rounds left, so the tree maximum is evaluated by memoised
    recursion over those states. Exhaustive, so only tiny worlds are allowed.
    """
    value, chosen, outside, start = _tiny_user_terms(world, rounds)
    memo = {}

    def best(consumed: frozenset, left: int) -> float:
        if left == 0:
            return 0.0
        key = (consumed, left)
        if key not in memo:
            stay = best(consumed, left - 1)
            options = [outside + stay]  # recommend nothing
            for i in range(len(value)):
                if i in consumed:
                    continue
                taken = best(consumed | {i}, left - 1)
                options.append(value[i] + chosen[i] * taken + (1.0 - chosen[i]) * stay)
            memo[key] = max(options)
        return memo[key]

    return best(start, rounds)


def greedy_trajectory_value(world: World, rounds: int) -> float:
    """Exact expected total enrichment of following the locally greedy policy.

    The greedy action is the available item with the highest single-round
    expected enrichment (lowest id on ties), or nothing when the outside
    option alone is strictly better.
    """
    value, chosen, outside, start = _tiny_user_terms(world, rounds)

    def follow(consumed: frozenset, left: int) -> float:
        if left == 0:
            return 0.0
        open_items = [i for i in range(len(value)) if i not in consumed]
        pick = max(open_items, key=lambda i: (value[i], -i)) if open_items else None
        if pick is None or outside > value[pick]:
            return outside + follow(consumed, left - 1)
        return (value[pick] + chosen[pick] * follow(consumed | {pick}, left - 1)
                + (1.0 - chosen[pick]) * follow(consumed, left - 1))

    return follow(start, rounds)
