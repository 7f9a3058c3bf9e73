"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the summary table appears at the
end of the terminal output under "acceptance criteria".

Criterion 8 needs the MovieLens 32M ``ratings.csv``. Point
``ENRICHREC_MOVIELENS`` at it (default ``data/ml-32m/ratings.csv`` relative
to the repository root); without it the criterion is reported as BLOCKED
and skipped.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
from conftest import make_tiny_world, record_criterion
from enrichrec.core import OUTSIDE, World
from enrichrec.estimation import Dataset, Objective, TrainConfig, fit, init_params, numerical_gradient
from enrichrec.movielens import SandboxConfig, run_movielens_experiment
from enrichrec.policies import BASELINES, PolicyKind, greedy_recommend, perfect_inputs
from enrichrec.simharness import (ExperimentConfig, brute_force_optimal, greedy_trajectory_value, play_round,
                                  replicate, run_warmup)
from enrichrec.synthgen import (FIRST_COMPONENT_COV, ITEM_MEAN, LAMBDA_C_BETA, LAMBDA_F_BETA, OUTSIDE_MEANS,
                                USER_COMPONENT_COV, Scenario, ScenarioConfig, make_world, sample_items,
                                sample_outside_options, sample_users)

SEED = 2024
DESK = dict(m=200, n=100, K=50, d=3)


def _ordering(report, greedy, baselines):
    """(strictly highest mean?, replications where greedy beats every baseline, detail)."""
    g = report.values(greedy)
    best_other = np.max([report.values(b) for b in baselines], axis=0)
    top_mean = all(report.mean(greedy) > report.mean(b) for b in baselines)
    wins = int(np.sum(g > best_other))
    runner_up = max(baselines, key=report.mean)
    detail = (f"{greedy.value} {report.mean(greedy):.2f} vs best baseline {runner_up.value} "
              f"{report.mean(runner_up):.2f}; wins {wins}/{g.size}")
    return top_mean, wins, detail


# ---------------------------------------------------------------------------
# C1: greedy trajectory equals the exhaustive policy-tree optimum


def _random_tiny_world(rng):
    n = int(rng.choice([2, 3, 4]))
    K = int(rng.choice([1, 2]))
    d = int(rng.choice([1, 2]))
    T = int(rng.choice([1, 2, 3]))
    if rng.random() < 0.5:
        scenario = list(Scenario)[int(rng.integers(len(Scenario)))]
        world = make_world(ScenarioConfig(m=1, n=n, K=K, d=d, scenario=scenario), rng)
    else:
        lf = rng.random()
        lc = lf * rng.random()
        world = World(user_a=[[1.0, *rng.normal(0, 2, d - 1)]], user_b=[[1.0, *rng.normal(0, 2, d - 1)]],
                      lambda_c=[lc], lambda_f=[lf],
                      item_x=rng.normal(0, 5, (n, d)), item_y=rng.normal(0, 5, (n, d)),
                      outside_x=rng.normal(0, 5, (K, d)), outside_y=rng.normal(0, 5, (K, d)),
                      availability=rng.dirichlet(np.ones(K)))
    return world, T


def test_c1_greedy_matches_exhaustive_optimum():
    rng = np.random.default_rng(SEED)
    start = time.perf_counter()
    worst = 0.0
    count = 300
    for _ in range(count):
        world, T = _random_tiny_world(rng)
        greedy = greedy_trajectory_value(world, T)
        best = brute_force_optimal(world, T)
        # independent enumeration straight from the score matrices
        ref = oracles.policy_tree_value(world.item_enrichment[0].tolist(), world.item_choice[0].tolist(),
                                        world.outside_enrichment[0].tolist(), world.outside_choice[0].tolist(),
                                        world.availability.tolist(), T)
        worst = max(worst, abs(greedy - best), abs(best - ref))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 60
    record_criterion("C1", ok, f"{count} tiny worlds, max |greedy - optimum| = {worst:.2e}, {elapsed:.1f}s")
    assert worst <= 1e-9
    assert elapsed < 60


# ---------------------------------------------------------------------------
# C2 / C7 / C9: perfect-information ordering


_perfect_cache = {}


def perfect_report(scenario, items="normal"):
    key = (scenario, items)
    if key not in _perfect_cache:
        cfg = ExperimentConfig(scenario=ScenarioConfig(**DESK, scenario=scenario, item_distribution=items),
                               info_level="perfect", seed=SEED, replications=5)
        start = time.perf_counter()
        report = replicate(cfg)
        _perfect_cache[key] = (report, time.perf_counter() - start)
    return _perfect_cache[key]


def _perfect_ordering(cid, items):
    lines, ok_all, total = [], True, 0.0
    for scenario in ("enriching", "tempting"):
        report, elapsed = perfect_report(scenario, items)
        total += elapsed
        top, wins, detail = _ordering(report, PolicyKind.GREEDY_PERFECT, BASELINES)
        ok_all &= top and wins >= 4
        lines.append(f"{scenario}: {detail}")
    ok_all &= total < 300
    record_criterion(cid, ok_all, "; ".join(lines) + f"; {total:.0f}s")
    return ok_all


def test_c2_perfect_information_ordering():
    assert _perfect_ordering("C2", "normal")


def test_c7_ordering_with_johnson_items():
    assert _perfect_ordering("C7", "johnson")


def test_c9_consumption_shift():
    report, _ = perfect_report("enriching")
    ge, gv = report.consumed_means(PolicyKind.GREEDY_PERFECT)
    ce, cv = report.consumed_means(PolicyKind.CLICK_BASED)
    ok = ge > ce and gv < cv
    record_criterion("C9", ok, f"consumed (enrichment, temptation): greedy ({ge:.3f}, {gv:.3f}) "
                               f"vs click-based ({ce:.3f}, {cv:.3f})")
    assert ok


# ---------------------------------------------------------------------------
# C3: partial-information ordering


@pytest.mark.slow
def test_c3_partial_information_ordering():
    lines, ok_all = [], True
    start = time.perf_counter()
    for scenario in ("enriching", "tempting"):
        cfg = ExperimentConfig(scenario=ScenarioConfig(**DESK, scenario=scenario),
                               info_level="partial", seed=SEED, replications=5)
        report = replicate(cfg)
        top, wins, detail = _ordering(report, PolicyKind.GREEDY_ESTIMATED, BASELINES)
        ok_all &= top and wins >= 4
        lines.append(f"{scenario}: {detail}")
    elapsed = time.perf_counter() - start
    ok_all &= elapsed < 900
    record_criterion("C3", ok_all, "; ".join(lines) + f"; {elapsed:.0f}s")
    assert ok_all


# ---------------------------------------------------------------------------
# C4: one tempting extra recommendation costs exactly D per affected round


def _tempting_instance(D, rounds=5):
    # round t offers good item 2t (u=10, v=0) and tempting item 2t+1 (u=10-D, v=100+D)
    u, v = [], []
    for _ in range(rounds):
        u += [10.0, 10.0 - D]
        v += [0.0, 100.0 + D]
    return make_tiny_world(u, v, [0.0], [-100.0], lambda_c=0.5, lambda_f=0.75)


def _play(world, slates):
    total = 0.0
    for t, slate in enumerate(slates):
        row = np.array([slate + [-1] * (2 - len(slate))])
        log = play_round(world, row, np.array([0]), world.outside_choice[:, 0], t)
        c = int(log.chosen[0])
        total += world.outside_enrichment[0, 0] if c == OUTSIDE else world.item_enrichment[0, c]
    return total


def test_c4_extra_tempting_item_costs_exactly_d():
    details, ok_all = [], True
    affected = {0, 2, 4}
    for D in (1.0, 10.0, 100.0):
        base = [[2 * t] for t in range(5)]
        extra = [[2 * t, 2 * t + 1] if t in affected else [2 * t] for t in range(5)]
        plain = _play(_tempting_instance(D), base)
        worse = _play(_tempting_instance(D), extra)
        loss = plain - worse
        # the greedy slate never appends the tempting item
        w = _tempting_instance(D)
        inp = perfect_inputs(PolicyKind.GREEDY_PERFECT, w)
        greedy_slate = greedy_recommend(inp.key[0], inp.choice[0], np.ones(w.n_items, bool), 2,
                                        float(inp.outside_value[0]))
        ok = loss == D * len(affected) and all(i % 2 == 0 for i in greedy_slate.tolist())
        ok_all &= ok
        details.append(f"D={D:g}: loss {loss:g} over {len(affected)} rounds")
    record_criterion("C4", ok_all, "; ".join(details))
    assert ok_all


# ---------------------------------------------------------------------------
# C5: estimation recovery

C5_TRAIN = TrainConfig(alpha=0.9, epochs=1000)
C5_SLATE = 15


def _c5_world(seed):
    world = make_world(ScenarioConfig(m=100, n=50, K=20, scenario="similar", seed=seed))
    log = run_warmup(world, np.random.default_rng(seed + 100), rounds=60, slate_size=C5_SLATE)
    held = np.random.default_rng(seed + 200).random(len(log)) < 0.2
    return world, log.select(~held), log.select(held)


def _held_out_scores(world, model, test):
    on = test.on_platform
    j, i = test.user[on], test.chosen[on]
    rmse = float(np.sqrt(np.mean((model.predicted_ratings()[j, i] - world.f_rating(world.item_feedback[j, i])) ** 2)))
    C = model.choice_scores()
    hits = 0
    for k in range(len(test)):
        slate = test.slates[k][test.slates[k] >= 0]
        if slate.size == 0:
            pred = OUTSIDE
        else:
            best = slate[np.argmax(C[test.user[k], slate])]
            pred = best if C[test.user[k], best] >= model.mu else OUTSIDE
        hits += int(pred == test.chosen[k])
    return rmse, hits / len(test)


@pytest.mark.slow
def test_c5_estimation_recovery():
    details, ok_all = [], True
    for seed in (0, 1, 2):
        world, train, test = _c5_world(seed)
        model = fit(Dataset.from_log(train, 100, 50), C5_TRAIN, world.expected_outside_enrichment(),
                    world.f_rating)
        rmse, acc = _held_out_scores(world, model, test)
        bar = 0.1 * float(np.std(world.item_feedback))
        constraints = (np.all(model.lambda_c_hat <= model.lambda_f_hat) and np.all(model.a_hat[:, 0] == 1.0)
                       and np.all(model.b_hat[:, 0] == 1.0) and model.sigma > 0)
        ok = rmse < bar and acc > 2.0 / (C5_SLATE + 1) and bool(constraints)
        ok_all &= ok
        details.append(f"seed {seed}: rmse {rmse:.3f} (bar {bar:.3f}) acc {acc:.3f} (bar {2 / (C5_SLATE + 1):.3f})")
    # analytic gradient vs central differences on a small slice
    world, train, _ = _c5_world(0)
    small = train.select(train.user < 6)
    keep_items = 50
    ds = Dataset.from_log(small, 6, keep_items)
    cfg = TrainConfig(latent_dim=3, alpha=0.9)
    params = init_params(ds, cfg, np.random.default_rng(0))
    obj = Objective(ds, cfg, world.f_rating, temperature=0.5)
    _, g = obj.value_and_grad(params)
    num = numerical_gradient(obj, params, step=1e-6)
    flat_a = np.concatenate([np.ravel(g[k]) for k in Objective.names])
    flat_n = np.concatenate([np.ravel(num[k]) for k in Objective.names])
    rel = float(np.linalg.norm(flat_a - flat_n) / np.linalg.norm(flat_n))
    ok_all &= rel < 1e-4
    details.append(f"gradient rel. error {rel:.1e}")
    record_criterion("C5", ok_all, "; ".join(details))
    assert ok_all


# ---------------------------------------------------------------------------
# C6: generator moments


def _mean_check(x, target, var):
    return abs(x.mean() - target) <= 5 * math.sqrt(var / x.size)


def _var_check(x, target):
    c = x - x.mean()
    m4 = float(np.mean(c ** 4))
    se = math.sqrt(max(m4 - target ** 2, 1e-12) / x.size)
    return abs(x.var(ddof=1) - target) <= 5 * se


def _cov_check(x, y, target, vx, vy):
    se = math.sqrt((vx * vy + target ** 2) / x.size)
    return abs(np.cov(x, y)[0, 1] - target) <= 5 * se


def _beta_moments(a, b):
    return a / (a + b), a * b / ((a + b) ** 2 * (a + b + 1))


def test_c6_generator_moments():
    N = 10_000
    failures = []
    checks = 0

    def check(name, ok):
        nonlocal checks
        checks += 1
        if not ok:
            failures.append(name)

    (vx, cxy), (_, vy) = FIRST_COMPONENT_COV
    (va, cab), (_, vb) = USER_COMPONENT_COV
    for scenario in Scenario:
        cfg = ScenarioConfig(m=N, n=N, K=N, d=3, scenario=scenario)
        rng = np.random.default_rng(SEED)
        users = sample_users(cfg, rng)
        items = sample_items(cfg, rng)
        outside = sample_outside_options(cfg, rng)
        user_a = np.array([u.a for u in users])
        user_b = np.array([u.b for u in users])
        for l in (1, 2):
            a, b = user_a[:, l], user_b[:, l]
            check(f"{scenario.value} a{l} mean", _mean_check(a, 0.0, va))
            check(f"{scenario.value} b{l} mean", _mean_check(b, 0.0, vb))
            check(f"{scenario.value} a{l} var", _var_check(a, va))
            check(f"{scenario.value} b{l} var", _var_check(b, vb))
            check(f"{scenario.value} a{l}b{l} cov", _cov_check(a, b, cab, va, vb))
        lambdas = (("lambda_c", np.array([u.lambda_c for u in users]), LAMBDA_C_BETA),
                   ("lambda_f", np.array([u.lambda_f for u in users]), LAMBDA_F_BETA))
        for name, lam, prior in lambdas:
            mean, var = _beta_moments(*prior)
            check(f"{scenario.value} {name} mean", _mean_check(lam, mean, var))
            check(f"{scenario.value} {name} var", _var_check(lam, var))
        blocks = (("item", np.array([o.x for o in items]), np.array([o.y for o in items]), ITEM_MEAN),
                  ("outside", np.array([o.x for o in outside]), np.array([o.y for o in outside]),
                   OUTSIDE_MEANS[scenario]))
        for name, X, Y, (mx, my) in blocks:
            check(f"{scenario.value} {name} x1 mean", _mean_check(X[:, 0], mx, vx))
            check(f"{scenario.value} {name} y1 mean", _mean_check(Y[:, 0], my, vy))
            check(f"{scenario.value} {name} x1 var", _var_check(X[:, 0], vx))
            check(f"{scenario.value} {name} y1 var", _var_check(Y[:, 0], vy))
            check(f"{scenario.value} {name} x1y1 cov", _cov_check(X[:, 0], Y[:, 0], cxy, vx, vy))
            for l in (1, 2):
                for lab, M in (("x", X), ("y", Y)):
                    check(f"{scenario.value} {name} {lab}{l} mean", _mean_check(M[:, l], 0.0, 1.0))
                    check(f"{scenario.value} {name} {lab}{l} var", _var_check(M[:, l], 1.0))
    ok = not failures
    record_criterion("C6", ok, f"{checks - len(failures)}/{checks} moment checks within 5 SE at {N} draws"
                               + (f"; failed: {', '.join(failures)}" if failures else ""))
    assert ok


# ---------------------------------------------------------------------------
# C8: MovieLens sandbox


def _movielens_path():
    env = os.environ.get("ENRICHREC_MOVIELENS")
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[1] / "data" / "ml-32m" / "ratings.csv"


def test_c8_movielens_sandbox():
    path = _movielens_path()
    if not path.is_file():
        record_criterion("C8", "BLOCKED", f"ratings file not found at {path}; set ENRICHREC_MOVIELENS")
        pytest.skip(f"BLOCKED: MovieLens ratings file not available at {path}")
    start = time.perf_counter()
    report = run_movielens_experiment(path, SandboxConfig(m_users=300, n_movies=200, resamples=5, seed=SEED))
    elapsed = time.perf_counter() - start
    g = report.values(PolicyKind.GREEDY_ESTIMATED)
    best = np.maximum(report.values(PolicyKind.RATINGS_BASED), report.values(PolicyKind.CLICK_BASED))
    wins = int(np.sum(g > best))
    ok = wins >= 4 and elapsed < 1800
    record_criterion("C8", ok, f"greedy beats both baselines in {wins}/5 resamples; means "
                               + ", ".join(f"{p.value} {report.mean(p):.2f}" for p in report.policies())
                               + f"; {elapsed:.0f}s")
    assert ok
