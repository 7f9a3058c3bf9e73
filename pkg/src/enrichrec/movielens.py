"""MovieLens ingestion and the ratings-derived simulation sandbox.

Pipeline per resample:

1. sample ``m`` users with at least ``ratings_per_user`` ratings and ``n``
   movies (popularity-weighted among the sampled users' ratings);
2. sample ``ratings_per_user`` ratings per user; each one is a consumption
   round, ordered by timestamp (ties by movie id). Rounds on movies outside
   the sampled set are outside-option consumptions;
3. replay the rounds chronologically, building each slate with a rating
   factorization trained only on earlier ratings, to obtain a click log;
4. fit the joint model with the feedback weight frozen at 1 and treat the
   fit as the ground truth of a :class:`SandboxWorld`;
5. simulate the greedy policy against ratings- and click-based ranking.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
import pandas as pd

from .core import OUTSIDE, IdentityRating, InteractionLog
from .errors import ConfigurationError, InputError, SizeError
from .estimation import Dataset, EstimatedModel, RatingFactorization, TrainConfig, fit
from .policies import PolicyInputs, PolicyKind, greedy_inputs_from_estimates
from .simharness import (MetricsReport, PolicyRun, consumed_pairs, histograms_for,
                         overall_individual_enrichment, run_policy_rounds)

_logger = logging.getLogger(__name__)

HEADER = ("userId", "movieId", "rating", "timestamp")
SANDBOX_POLICIES = (PolicyKind.GREEDY_ESTIMATED, PolicyKind.RATINGS_BASED, PolicyKind.CLICK_BASED)


# ---------------------------------------------------------------------------
# ingestion


def valid_half_star(rating) -> np.ndarray:
    r = np.asarray(rating, dtype=float)
    return (r >= 0.5) & (r <= 5.0) & (np.round(r * 2.0) == r * 2.0)


@dataclass(frozen=True)
class RatingRow:
    user_id: int
    movie_id: int
    rating: float
    timestamp: int

    def __post_init__(self):
        if not valid_half_star(self.rating):
            raise InputError(f"rating {self.rating} is not a half-star value in [0.5, 5]")
        if self.timestamp <= 0:
            raise InputError(f"timestamp must be positive, got {self.timestamp}")


def _check_header(fields, path) -> None:
    if tuple(f.strip() for f in fields) != HEADER:
        raise InputError(f"{path}: expected header {','.join(HEADER)!r}, got {','.join(fields)!r}")


def _open_checked(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"ratings file not found: {path}")
    return path


def iter_ratings(path) -> Iterator[RatingRow]:
    """Stream validated rows; errors name the offending line."""
    path = _open_checked(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file, header row missing")
        _check_header(header, path)
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != 4:
                raise InputError(f"{path}:{line}: expected 4 fields, got {len(row)}")
            try:
                user, movie, ts = int(row[0]), int(row[1]), int(row[3])
                rating = float(row[2])
            except ValueError:
                raise InputError(f"{path}:{line}: malformed row {','.join(row)!r}") from None
            try:
                yield RatingRow(user, movie, rating, ts)
            except InputError as exc:
                raise InputError(f"{path}:{line}: {exc}") from None


def load_ratings(path) -> list:
    return list(iter_ratings(path))


@dataclass
class RatingsTable:
    """Columnar ratings (parallel arrays)."""

    user: np.ndarray
    movie: np.ndarray
    rating: np.ndarray
    timestamp: np.ndarray

    def __post_init__(self):
        self.user = np.asarray(self.user, dtype=np.int64)
        self.movie = np.asarray(self.movie, dtype=np.int64)
        self.rating = np.asarray(self.rating, dtype=float)
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)

    def __len__(self) -> int:
        return self.user.size

    @classmethod
    def from_rows(cls, rows: Iterable[RatingRow]) -> "RatingsTable":
        rows = list(rows)
        return cls([r.user_id for r in rows], [r.movie_id for r in rows],
                   [r.rating for r in rows], [r.timestamp for r in rows])

    @classmethod
    def concat(cls, tables: Sequence["RatingsTable"]) -> "RatingsTable":
        if not tables:
            return cls([], [], [], [])
        return cls(*(np.concatenate([getattr(t, k) for t in tables])
                     for k in ("user", "movie", "rating", "timestamp")))

    def select(self, mask) -> "RatingsTable":
        return RatingsTable(self.user[mask], self.movie[mask], self.rating[mask], self.timestamp[mask])


def iter_rating_chunks(path, chunksize: int = 2_000_000) -> Iterator[RatingsTable]:
    """Stream a large ratings file in validated columnar chunks."""
    path = _open_checked(path)
    with path.open(encoding="utf-8") as fh:
        _check_header(fh.readline().rstrip("\r\n").split(","), path)
    first_line = 2
    reader = pd.read_csv(path, chunksize=chunksize, dtype=str, keep_default_na=False)
    for frame in reader:
        if frame.shape[1] != 4:
            raise InputError(f"{path}: expected 4 columns, got {frame.shape[1]}")
        cols = []
        for name, kind in zip(HEADER, ("int", "int", "float", "int")):
            values = pd.to_numeric(frame[name], errors="coerce")
            bad = values.isna().to_numpy()
            if kind == "int":
                bad |= ~bad & (values.fillna(0) % 1 != 0).to_numpy()
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise InputError(f"{path}:{first_line + k}: malformed {name} {frame[name].iloc[k]!r}")
            cols.append(values.to_numpy())
        table = RatingsTable(*cols)
        bad = ~valid_half_star(table.rating)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise InputError(f"{path}:{first_line + k}: rating {table.rating[k]} is not a half-star value")
        bad = table.timestamp <= 0
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise InputError(f"{path}:{first_line + k}: timestamp must be positive")
        first_line += len(table)
        yield table


def load_ratings_table(path, chunksize: int = 2_000_000) -> RatingsTable:
    return RatingsTable.concat(list(iter_rating_chunks(path, chunksize)))


def write_ratings(path, table: RatingsTable) -> None:
    """Write ``table`` in the MovieLens ``ratings.csv`` layout."""
    frame = pd.DataFrame({"userId": table.user, "movieId": table.movie,
                          "rating": table.rating, "timestamp": table.timestamp})
    frame.to_csv(path, index=False, float_format="%.1f")


# ---------------------------------------------------------------------------
# sandbox sampling


@dataclass
class SandboxConfig:
    m_users: int = 300
    n_movies: int = 200
    ratings_per_user: int = 25
    resamples: int = 5
    latent_dim: int = 3
    slate_size: int = 15
    rounds: int = 50
    seed: int = 0
    min_train: int = 32
    train: TrainConfig = field(default_factory=lambda: TrainConfig(freeze_lambda_f=1.0))

    def __post_init__(self):
        for name in ("m_users", "n_movies", "ratings_per_user", "resamples", "latent_dim",
                     "slate_size", "rounds", "min_train"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.train.freeze_lambda_f != 1.0 or self.train.latent_dim != self.latent_dim:
            self.train = TrainConfig(**{**asdict(self.train), "freeze_lambda_f": 1.0,
                                        "latent_dim": self.latent_dim})

    def to_dict(self) -> dict:
        return asdict(self)

    def resample_rng(self, resample: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([int(self.seed), int(resample)]))


@dataclass
class Sandbox:
    """One resample: sampled users/movies, their consumption rounds and history.

    Round arrays are ordered by (user, round). ``round_item`` is the local
    movie index or ``OUTSIDE``. ``history_*`` hold every rating of a sampled
    user on a sampled movie (local indices), sorted by (timestamp, user, movie).
    """

    user_ids: np.ndarray
    movie_ids: np.ndarray
    round_user: np.ndarray
    round_index: np.ndarray
    round_movie: np.ndarray
    round_item: np.ndarray
    round_rating: np.ndarray
    round_time: np.ndarray
    history_user: np.ndarray
    history_item: np.ndarray
    history_rating: np.ndarray
    history_time: np.ndarray
    resample: int = 0

    @property
    def m(self) -> int:
        return self.user_ids.size

    @property
    def n(self) -> int:
        return self.movie_ids.size

    @property
    def outside_events(self) -> np.ndarray:
        return self.round_item == OUTSIDE

    def outside_counts(self) -> np.ndarray:
        return np.bincount(self.round_user[self.outside_events], minlength=self.m)


def eligible_users(counts: dict, ratings_per_user: int) -> np.ndarray:
    return np.array(sorted(u for u, c in counts.items() if c >= ratings_per_user), dtype=np.int64)


def _user_counts(users: np.ndarray) -> dict:
    ids, counts = np.unique(users, return_counts=True)
    return dict(zip(ids.tolist(), counts.tolist()))


def sample_sandbox_users(counts: dict, config: SandboxConfig, rng: np.random.Generator) -> np.ndarray:
    pool = eligible_users(counts, config.ratings_per_user)
    if pool.size < config.m_users:
        raise SizeError(f"only {pool.size} users have >= {config.ratings_per_user} ratings, "
                        f"{config.m_users} requested")
    return np.sort(rng.choice(pool, size=config.m_users, replace=False))


def assemble_sandbox(table: RatingsTable, users: np.ndarray, config: SandboxConfig,
                     rng: np.random.Generator, resample: int = 0) -> Sandbox:
    """Sample movies and rounds for an already sampled user set."""
    mine = table.select(np.isin(table.user, users))
    movies, counts = np.unique(mine.movie, return_counts=True)
    if movies.size < config.n_movies:
        raise SizeError(f"sampled users rated only {movies.size} movies, {config.n_movies} requested")
    chosen = np.sort(rng.choice(movies, size=config.n_movies, replace=False, p=counts / counts.sum()))
    local_movie = {int(mv): k for k, mv in enumerate(chosen)}
    local_user = {int(u): k for k, u in enumerate(users)}

    order = np.lexsort((mine.movie, mine.timestamp, mine.user))
    mine = mine.select(order)
    starts = np.searchsorted(mine.user, users)
    ends = np.searchsorted(mine.user, users, side="right")
    R = config.ratings_per_user
    picks = []
    for lo, hi in zip(starts, ends):
        if hi - lo < R:
            raise SizeError("user has fewer ratings than ratings_per_user")
        picks.append(lo + np.sort(rng.choice(hi - lo, size=R, replace=False)))
    picks = np.concatenate(picks) if picks else np.zeros(0, dtype=np.int64)
    rounds = mine.select(picks)  # already (timestamp, movie) ordered inside each user
    item = np.array([local_movie.get(int(mv), OUTSIDE) for mv in rounds.movie], dtype=np.int64)

    hist = mine.select(np.isin(mine.movie, chosen))
    h_user = np.array([local_user[int(u)] for u in hist.user], dtype=np.int64)
    h_item = np.array([local_movie[int(mv)] for mv in hist.movie], dtype=np.int64)
    h_order = np.lexsort((h_item, h_user, hist.timestamp))
    return Sandbox(
        user_ids=np.asarray(users, dtype=np.int64), movie_ids=chosen,
        round_user=np.repeat(np.arange(len(users)), R), round_index=np.tile(np.arange(R), len(users)),
        round_movie=rounds.movie, round_item=item, round_rating=rounds.rating, round_time=rounds.timestamp,
        history_user=h_user[h_order], history_item=h_item[h_order],
        history_rating=hist.rating[h_order], history_time=hist.timestamp[h_order],
        resample=resample,
    )


def build_sandbox(rows, config: SandboxConfig, rng: np.random.Generator, resample: int = 0) -> Sandbox:
    """Sample one sandbox from in-memory ratings (``RatingRow`` list or table)."""
    table = rows if isinstance(rows, RatingsTable) else RatingsTable.from_rows(rows)
    users = sample_sandbox_users(_user_counts(table.user), config, rng)
    return assemble_sandbox(table, users, config, rng, resample)


def build_sandboxes(source, config: SandboxConfig, chunksize: int = 2_000_000) -> list:
    """All ``config.resamples`` sandboxes, each with its own sub-seed.

    ``source`` is a ratings table or a path. For a path the file is read in
    two streaming passes (user counts, then the sampled users' rows), so the
    full file is never held in memory. Both routes give identical sandboxes.
    """
    rngs = [config.resample_rng(r) for r in range(config.resamples)]
    if isinstance(source, (RatingsTable, list)):
        table = source if isinstance(source, RatingsTable) else RatingsTable.from_rows(source)
        return [build_sandbox(table, config, rng, r) for r, rng in enumerate(rngs)]

    counts: dict = {}
    for chunk in iter_rating_chunks(source, chunksize):
        ids, c = np.unique(chunk.user, return_counts=True)
        for u, k in zip(ids.tolist(), c.tolist()):
            counts[u] = counts.get(u, 0) + k
    user_sets = [sample_sandbox_users(counts, config, rng) for rng in rngs]
    wanted = np.unique(np.concatenate(user_sets))
    kept = [chunk.select(np.isin(chunk.user, wanted)) for chunk in iter_rating_chunks(source, chunksize)]
    table = RatingsTable.concat(kept)
    return [assemble_sandbox(table, users, config, rng, r)
            for r, (users, rng) in enumerate(zip(user_sets, rngs))]


# ---------------------------------------------------------------------------
# click-log reconstruction


def _cold_scores(items: np.ndarray, ratings: np.ndarray, n: int) -> np.ndarray:
    """Per-movie mean rating of the data so far; unseen movies get the global mean."""
    if ratings.size == 0:
        return np.zeros(n)
    sums = np.bincount(items, weights=ratings, minlength=n)
    cnt = np.bincount(items, minlength=n)
    return np.where(cnt > 0, sums / np.maximum(cnt, 1), ratings.mean())


def reconstruct_click_history(sandbox: Sandbox, slate_size: int = 15, latent_dim: int = 3,
                              min_train: int = 32, seed: int = 0) -> InteractionLog:
    """Replay the sampled rounds with a ratings-based recommender.

    A round at time ``t`` only sees history ratings timestamped strictly
    before ``t``. The factorization is refitted whenever the visible history
    has doubled since the last fit (first fit at ``min_train`` ratings);
    before that, movies are ranked by their mean rating so far. The round's
    movie, when it belongs to the sampled set, replaces the last slate slot
    if the recommender did not rank it.
    """
    m, n = sandbox.m, sandbox.n
    order = np.lexsort((sandbox.round_movie, sandbox.round_user, sandbox.round_time))
    visible = np.searchsorted(sandbox.history_time, sandbox.round_time, side="left")
    consumed = np.zeros((m, n), dtype=bool)
    slates = np.full((len(order), slate_size), -1, dtype=np.int64)
    fitted_at = 0
    scores = None
    for pos in order:
        k = int(visible[pos])
        if k >= min_train and (fitted_at == 0 or k >= 2 * fitted_at):
            model = RatingFactorization.fit(sandbox.history_user[:k], sandbox.history_item[:k],
                                            sandbox.history_rating[:k], m, n,
                                            latent_dim=latent_dim, seed=seed)
            scores = model.predict()
            fitted_at = k
        j = int(sandbox.round_user[pos])
        if scores is None or fitted_at == 0:
            key = _cold_scores(sandbox.history_item[:k], sandbox.history_rating[:k], n)
        else:
            key = scores[j]
        masked = np.where(consumed[j], -np.inf, key)
        top = np.argsort(-masked, kind="stable")[:slate_size]
        top = top[~consumed[j, top]]
        item = int(sandbox.round_item[pos])
        if item != OUTSIDE:
            if item not in top:
                top = np.append(top[: slate_size - 1], item) if top.size >= slate_size else np.append(top, item)
            consumed[j, item] = True
        slates[pos, : top.size] = top
    rating = np.where(sandbox.round_item != OUTSIDE, sandbox.round_rating, np.nan)
    return InteractionLog(sandbox.round_user, sandbox.round_index, slates, sandbox.round_item,
                          rating, np.full(len(order), -1))


# ---------------------------------------------------------------------------
# estimated world


def outside_enrichment_means(sandbox: Sandbox) -> np.ndarray:
    """Mean rating of each user's outside rounds (population mean when a user has none)."""
    out = sandbox.outside_events
    counts = np.bincount(sandbox.round_user[out], minlength=sandbox.m)
    sums = np.bincount(sandbox.round_user[out], weights=sandbox.round_rating[out], minlength=sandbox.m)
    if out.any():
        fallback = float(sandbox.round_rating[out].mean())
    else:
        fallback = float(sandbox.round_rating.mean()) if sandbox.round_rating.size else 0.0
    missing = counts == 0
    if missing.any():
        _logger.info("%d users without outside rounds use the population mean %.3f",
                     int(missing.sum()), fallback)
    return np.where(missing, fallback, sums / np.maximum(counts, 1))


def estimate_world_from_sandbox(log: InteractionLog, sandbox: Sandbox,
                                train: Optional[TrainConfig] = None) -> EstimatedModel:
    """Joint fit with the feedback weight frozen at 1 (ratings are enrichment)."""
    train = train or TrainConfig(freeze_lambda_f=1.0)
    if train.freeze_lambda_f != 1.0:
        train = TrainConfig(**{**asdict(train), "freeze_lambda_f": 1.0})
    dataset = Dataset.from_log(log, sandbox.m, sandbox.n)
    return fit(dataset, train, outside_enrichment_means(sandbox), IdentityRating())


@dataclass
class SandboxWorld:
    """Simulation environment whose ground truth is a fitted model.

    Outside options are a single normal choice score ``N(mu, sigma^2)``
    redrawn each round; consuming one yields the user's mean outside rating.
    """

    model: EstimatedModel
    consumed: list = field(default_factory=list)
    round: int = 0

    def __post_init__(self):
        if not self.consumed:
            self.consumed = [set() for _ in range(self.model.n_users)]
        self.item_enrichment = self.model.u_hat()
        self.item_temptation = self.model.v_hat()
        self.item_choice = self.model.choice_scores()
        self.item_feedback = self.model.feedback_scores()
        self.f_rating = self.model.f_rating

    @property
    def n_users(self) -> int:
        return self.model.n_users

    @property
    def n_items(self) -> int:
        return self.model.n_items

    def expected_outside_enrichment(self) -> np.ndarray:
        return self.model.expected_outside_enrichment

    def draw_outside(self, rng: np.random.Generator, rounds: int):
        m = self.n_users
        choice = rng.normal(self.model.mu, self.model.sigma, size=(m, rounds))
        idx = np.zeros((m, rounds), dtype=np.int64)
        return idx, choice, np.repeat(self.model.expected_outside_enrichment[:, None], rounds, axis=1)

    def outside_enrichment_of(self, users: np.ndarray, outside_index: np.ndarray) -> np.ndarray:
        return self.model.expected_outside_enrichment[users]

    def fork(self) -> "SandboxWorld":
        return SandboxWorld(self.model, [set(s) for s in self.consumed], self.round)

    def policy_inputs(self, kind: PolicyKind) -> PolicyInputs:
        kind = PolicyKind(kind)
        if kind.is_greedy:
            return greedy_inputs_from_estimates(self.item_enrichment, self.item_choice,
                                                self.model.belief(), kind)
        key = {
            PolicyKind.PURE_ENRICHMENT: self.item_enrichment,
            PolicyKind.PURE_TEMPTATION: self.item_temptation,
            PolicyKind.RATINGS_BASED: self.item_feedback,
            PolicyKind.CLICK_BASED: self.item_choice,
        }[kind]
        return PolicyInputs(kind, key)


def sandbox_world(model: EstimatedModel, sandbox: Sandbox, log: InteractionLog) -> SandboxWorld:
    """World whose users have already consumed their on-platform history."""
    world = SandboxWorld(model)
    on = log.on_platform
    for j, i in zip(log.user[on].tolist(), log.chosen[on].tolist()):
        world.consumed[j].add(i)
    world.round = sandbox.round_index.max() + 1 if sandbox.round_index.size else 0
    return world


def run_sandbox_policies(world: SandboxWorld, rounds: int = 50, slate_size: int = 15, seed: int = 0,
                         policies: Sequence[PolicyKind] = SANDBOX_POLICIES, resample: int = 0,
                         keep_logs: bool = False) -> list:
    """Every policy on a fork of ``world`` with shared outside draws."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(resample), 2]))
    draws = world.draw_outside(rng, rounds)
    runs = []
    for kind in policies:
        branch = world.fork()
        log = run_policy_rounds(branch, branch.policy_inputs(kind), rounds=rounds, slate_size=slate_size,
                                start_round=int(world.round), outside_draws=draws)
        runs.append(PolicyRun(
            policy=PolicyKind(kind), replication=resample,
            enrichment=overall_individual_enrichment(log, branch),
            pairs=consumed_pairs(log, branch),
            on_platform=int(np.sum(log.chosen != OUTSIDE)),
            log=log if keep_logs else None, world=branch if keep_logs else None,
        ))
    return runs


def run_movielens_experiment(source, config: SandboxConfig, policies: Sequence[PolicyKind] = SANDBOX_POLICIES,
                             histogram_bins: int = 20, chunksize: int = 2_000_000) -> MetricsReport:
    """Full sandbox protocol over every resample; ``source`` is a path or table."""
    start = time.perf_counter()
    runs = []
    diagnostics = []
    for sandbox in build_sandboxes(source, config, chunksize):
        r = sandbox.resample
        log = reconstruct_click_history(sandbox, config.slate_size, config.latent_dim,
                                        config.min_train, seed=config.seed + r)
        train = TrainConfig(**{**asdict(config.train), "seed": config.train.seed + r})
        model = estimate_world_from_sandbox(log, sandbox, train)
        world = sandbox_world(model, sandbox, log)
        runs.extend(run_sandbox_policies(world, config.rounds, config.slate_size, config.seed,
                                         policies, resample=r))
        diagnostics.append({
            "resample": r,
            "on_platform_rounds": int(np.sum(log.on_platform)),
            "outside_rounds": int(np.sum(~log.on_platform)),
            "mu": model.mu, "sigma": model.sigma,
            "mean_lambda_c": float(model.lambda_c_hat.mean()),
        })
        _logger.info("resample %d/%d done", r + 1, config.resamples)
    return MetricsReport(
        config=config.to_dict(), runs=runs, histograms=histograms_for(runs, histogram_bins),
        runtime_seconds=time.perf_counter() - start,
        metadata={"resamples": diagnostics},
    )


def synthetic_ratings(n_users: int = 400, n_movies: int = 600, min_ratings: int = 30,
                      max_ratings: int = 120, latent_dim: int = 3, seed: int = 0) -> RatingsTable:
    """A MovieLens-shaped ratings table drawn from a random factor model.

    Movie popularity is Zipf-like, ratings are half stars and timestamps are
    increasing per user. Meant for tests and demos when the real file is
    not at hand.
    """
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, 0.6, (n_users, latent_dim))
    Q = rng.normal(0.0, 0.6, (n_movies, latent_dim))
    item_bias = rng.normal(0.0, 0.5, n_movies)
    popularity = 1.0 / np.arange(1, n_movies + 1) ** 0.8
    popularity = rng.permutation(popularity / popularity.sum())
    cols = {k: [] for k in ("user", "movie", "rating", "timestamp")}
    for j in range(n_users):
        k = int(rng.integers(min_ratings, max_ratings + 1))
        movies = rng.choice(n_movies, size=min(k, n_movies), replace=False, p=popularity)
        raw = 3.5 + item_bias[movies] + Q[movies] @ P[j] + rng.normal(0.0, 0.4, movies.size)
        stars = np.clip(np.round(raw * 2.0) / 2.0, 0.5, 5.0)
        start = int(rng.integers(9 * 10**8, 15 * 10**8))
        times = start + np.cumsum(rng.integers(1, 10**6, movies.size))
        cols["user"].append(np.full(movies.size, j + 1))
        cols["movie"].append(movies + 1)
        cols["rating"].append(stars)
        cols["timestamp"].append(times)
    return RatingsTable(*(np.concatenate(cols[k]) for k in ("user", "movie", "rating", "timestamp")))
