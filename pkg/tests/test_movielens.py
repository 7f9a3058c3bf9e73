import dataclasses

import numpy as np
import pytest

from enrichrec.core import OUTSIDE
from enrichrec.errors import InputError, SizeError
from enrichrec.estimation import Dataset, TrainConfig
from enrichrec.movielens import (HEADER, SANDBOX_POLICIES, RatingRow, RatingsTable, Sandbox, SandboxConfig,
                                 build_sandbox, build_sandboxes, estimate_world_from_sandbox, iter_rating_chunks,
                                 load_ratings, load_ratings_table, outside_enrichment_means,
                                 reconstruct_click_history, run_movielens_experiment, sandbox_world,
                                 synthetic_ratings, write_ratings)
from enrichrec.policies import PolicyKind

HEAD = ",".join(HEADER) + "\n"


def small_config(**kw):
    base = dict(m_users=30, n_movies=60, ratings_per_user=25, resamples=2, rounds=10, slate_size=8,
                min_train=32, train=TrainConfig(epochs=40, freeze_lambda_f=1.0))
    base.update(kw)
    return SandboxConfig(**base)


@pytest.fixture(scope="module")
def table():
    return synthetic_ratings(n_users=120, n_movies=200, seed=1)


@pytest.fixture(scope="module")
def sandbox(table):
    cfg = small_config()
    return build_sandbox(table, cfg, cfg.resample_rng(0))


# ---------------------------------------------------------------------------
# ingestion


def test_header_only_file_is_empty(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEAD)
    assert load_ratings(p) == []
    assert len(load_ratings_table(p)) == 0


def test_single_row_parses(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEAD + "1,296,5.0,1147880044\n")
    assert load_ratings(p) == [RatingRow(1, 296, 5.0, 1147880044)]
    t = load_ratings_table(p)
    assert (t.user[0], t.movie[0], t.rating[0], t.timestamp[0]) == (1, 296, 5.0, 1147880044)


def test_non_half_star_rating_rejected_with_line_number(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEAD + "1,296,5.0,1147880044\n1,297,3.7,1147880045\n")
    with pytest.raises(InputError, match=":3:"):
        load_ratings(p)
    with pytest.raises(InputError, match=":3:"):
        load_ratings_table(p, chunksize=1)


def test_malformed_rows_and_headers(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("user,movie,rating,time\n1,2,3.0,4\n")
    with pytest.raises(InputError):
        load_ratings(p)
    with pytest.raises(InputError):
        load_ratings_table(p)
    p.write_text(HEAD + "1,2,3.0,4\nx,2,3.0,4\n")
    with pytest.raises(InputError, match=":3:"):
        load_ratings(p)
    with pytest.raises(InputError, match=":3:"):
        load_ratings_table(p)
    p.write_text(HEAD + "1,2,3.0,0\n")
    with pytest.raises(InputError):
        load_ratings(p)
    with pytest.raises(InputError):
        load_ratings(tmp_path / "missing.csv")


def test_write_then_read_round_trip(tmp_path, table):
    p = tmp_path / "r.csv"
    write_ratings(p, table)
    back = load_ratings_table(p, chunksize=777)
    for k in ("user", "movie", "rating", "timestamp"):
        assert np.array_equal(getattr(back, k), getattr(table, k))
    rows = load_ratings(p)
    assert len(rows) == len(table)


# ---------------------------------------------------------------------------
# sampling


def test_rounds_are_chronological_per_user(sandbox):
    R = 25
    assert sandbox.round_user.size == sandbox.m * R
    for j in range(sandbox.m):
        sel = sandbox.round_user == j
        keys = list(zip(sandbox.round_time[sel].tolist(), sandbox.round_movie[sel].tolist()))
        assert keys == sorted(keys)
        assert sandbox.round_index[sel].tolist() == list(range(R))


def test_round_items_map_to_sampled_movies(sandbox):
    on = sandbox.round_item != OUTSIDE
    assert np.array_equal(sandbox.movie_ids[sandbox.round_item[on]], sandbox.round_movie[on])
    assert not np.any(np.isin(sandbox.round_movie[~on], sandbox.movie_ids))


def test_history_sorted_by_time(sandbox):
    assert np.all(np.diff(sandbox.history_time) >= 0)


def test_sampling_is_deterministic(table):
    cfg = small_config()
    a = build_sandbox(table, cfg, cfg.resample_rng(0))
    b = build_sandbox(table, cfg, cfg.resample_rng(0))
    for f in dataclasses.fields(Sandbox):
        assert np.array_equal(getattr(a, f.name), getattr(b, f.name))


def test_streaming_and_in_memory_routes_agree(tmp_path, table):
    p = tmp_path / "r.csv"
    write_ratings(p, table)
    cfg = small_config()
    mem = build_sandboxes(table, cfg)
    stream = build_sandboxes(p, cfg, chunksize=1000)
    assert len(mem) == len(stream) == cfg.resamples
    for a, b in zip(mem, stream):
        for f in dataclasses.fields(Sandbox):
            assert np.array_equal(getattr(a, f.name), getattr(b, f.name)), f.name


def test_too_few_users_is_a_size_error(table):
    cfg = small_config(m_users=10_000)
    with pytest.raises(SizeError):
        build_sandbox(table, cfg, cfg.resample_rng(0))


# ---------------------------------------------------------------------------
# click-log reconstruction


def test_consumed_movie_is_in_its_slate(sandbox):
    log = reconstruct_click_history(sandbox, slate_size=8, min_train=32)
    on = log.chosen != OUTSIDE
    assert np.all(np.any(log.slates[on] == log.chosen[on][:, None], axis=1))
    assert np.all(log.outside == -1)
    assert np.array_equal(np.isnan(log.rating), ~on)


def test_slates_never_repeat_consumed_movies(sandbox):
    log = reconstruct_click_history(sandbox, slate_size=8, min_train=32)
    for j in range(sandbox.m):
        seen = set()
        sel = np.flatnonzero(log.user == j)
        for r in sel[np.argsort(log.round[sel])]:
            slate = set(log.slates[r][log.slates[r] >= 0].tolist())
            assert not slate & seen
            if log.chosen[r] != OUTSIDE:
                seen.add(int(log.chosen[r]))


def test_cold_start_ranks_by_mean_rating_so_far(sandbox):
    # no factorization ever fits; the first round overall has no history at all
    log = reconstruct_click_history(sandbox, slate_size=8, min_train=10**9)
    first = int(np.argmin(sandbox.round_time))
    visible = sandbox.history_time < sandbox.round_time[first]
    if not visible.any():
        slate = log.slates[first]
        assert slate[:7].tolist() == list(range(7))
    # a later round: slate ordered by per-movie mean of strictly earlier ratings
    late = int(np.argmax(sandbox.round_time))
    vis = sandbox.history_time < sandbox.round_time[late]
    means = {}
    for i, r in zip(sandbox.history_item[vis], sandbox.history_rating[vis]):
        means.setdefault(int(i), []).append(float(r))
    slate = log.slates[late]
    ranked = [i for i in slate[:7].tolist() if i >= 0]
    global_mean = float(np.mean(sandbox.history_rating[vis]))
    score = [np.mean(means[i]) if i in means else global_mean for i in ranked]
    assert score == sorted(score, reverse=True)


def test_reconstruction_does_not_peek_at_later_ratings(sandbox):
    cut = float(np.median(sandbox.round_time))
    changed = dataclasses.replace(sandbox, history_rating=np.where(sandbox.history_time >= cut, 0.5,
                                                                   sandbox.history_rating))
    a = reconstruct_click_history(sandbox, slate_size=8, min_train=32)
    b = reconstruct_click_history(changed, slate_size=8, min_train=32)
    early = sandbox.round_time <= cut
    assert early.any()
    assert np.array_equal(a.slates[early], b.slates[early])


# ---------------------------------------------------------------------------
# estimated world


def test_outside_enrichment_falls_back_to_population_mean():
    sb = Sandbox(
        user_ids=np.array([1, 2]), movie_ids=np.array([10]),
        round_user=np.array([0, 0, 1]), round_index=np.array([0, 1, 0]),
        round_movie=np.array([5, 6, 10]), round_item=np.array([OUTSIDE, OUTSIDE, 0]),
        round_rating=np.array([2.0, 4.0, 5.0]), round_time=np.array([1, 2, 3]),
        history_user=np.array([1]), history_item=np.array([0]), history_rating=np.array([5.0]),
        history_time=np.array([3]),
    )
    assert outside_enrichment_means(sb).tolist() == [3.0, 3.0]
    sb2 = dataclasses.replace(sb, round_rating=np.array([2.0, 3.0, 5.0]))
    assert outside_enrichment_means(sb2).tolist() == [2.5, 2.5]


@pytest.fixture(scope="module")
def fitted(sandbox):
    log = reconstruct_click_history(sandbox, slate_size=8, min_train=32)
    model = estimate_world_from_sandbox(log, sandbox, TrainConfig(epochs=80, freeze_lambda_f=1.0))
    return log, model


def test_sandbox_fit_freezes_feedback_weight(fitted):
    _, model = fitted
    assert np.all(model.lambda_f_hat == 1.0)
    assert np.all(model.lambda_c_hat <= 1.0)


def test_ratings_based_ranking_equals_enrichment_ranking(sandbox, fitted):
    log, model = fitted
    world = sandbox_world(model, sandbox, log)
    key = world.policy_inputs(PolicyKind.RATINGS_BASED).key
    assert np.allclose(key, world.item_enrichment)
    assert np.array_equal(np.argsort(-key, axis=1, kind="stable"),
                          np.argsort(-world.item_enrichment, axis=1, kind="stable"))


def test_history_is_pre_marked_consumed(sandbox, fitted):
    log, model = fitted
    world = sandbox_world(model, sandbox, log)
    on = log.chosen != OUTSIDE
    for j, i in zip(log.user[on], log.chosen[on]):
        assert i in world.consumed[j]
    assert world.round == 25


def test_held_out_choice_accuracy_beats_random(sandbox):
    log = reconstruct_click_history(sandbox, slate_size=8, min_train=32)
    train_rows = log.round < 20
    test_rows = ~train_rows
    train_log = log.select(train_rows)
    model = estimate_world_from_sandbox(train_log, sandbox, TrainConfig(epochs=150, freeze_lambda_f=1.0))
    c = model.choice_scores()
    hits = 0
    test = np.flatnonzero(test_rows)
    for r in test:
        slate = log.slates[r][log.slates[r] >= 0]
        scores = c[log.user[r], slate]
        best = int(np.argmax(scores))
        pred = slate[best] if scores[best] >= model.mu else OUTSIDE
        hits += int(pred == log.chosen[r])
    assert hits / test.size > 1.0 / (8 + 1)


def test_sandbox_experiment_reports_three_policies(table):
    cfg = small_config(resamples=1)
    report = run_movielens_experiment(table, cfg)
    assert report.policies() == list(SANDBOX_POLICIES)
    assert len(report.runs) == 3
    assert report.metadata["resamples"][0]["resample"] == 0


def test_dataset_from_reconstructed_log_is_consistent(sandbox):
    log = reconstruct_click_history(sandbox, slate_size=8, min_train=32)
    ds = Dataset.from_log(log, sandbox.m, sandbox.n)
    assert ds.n_ratings == int(np.sum(sandbox.round_item != OUTSIDE))


def test_synthetic_ratings_shape():
    t = synthetic_ratings(n_users=20, n_movies=50, min_ratings=30, max_ratings=40, seed=3)
    counts = np.bincount(t.user)[1:]
    assert counts.min() >= 30 and counts.max() <= 40
    assert isinstance(t, RatingsTable)
    assert np.all(np.round(t.rating * 2) == t.rating * 2)
    for u in np.unique(t.user):
        assert np.all(np.diff(t.timestamp[t.user == u]) > 0)


def test_chunks_stream_in_order(tmp_path, table):
    p = tmp_path / "r.csv"
    write_ratings(p, table)
    sizes = [len(c) for c in iter_rating_chunks(p, chunksize=500)]
    assert sum(sizes) == len(table) and max(sizes) <= 500
