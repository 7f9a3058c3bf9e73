"""Command line entry point: ``enrichrec <subcommand> [flags]``.

Subcommands
-----------
synth-run   run the synthetic protocol and write a report
ml-run      build MovieLens sandboxes from a ratings file and compare policies
estimate    fit the joint model to a saved interaction log
report      recompute metrics, CSV and histograms from saved run bundles
demo-ratings
            write a synthetic file in the MovieLens ratings layout

Every output report records the full set of parsed flags under
``metadata.cli``. Usage errors exit with status 2, runtime errors with 1.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import AffineClampRating, IdentityRating
from .errors import EnrichrecError
from .estimation import Dataset, TrainConfig, fit
from .policies import PolicyKind
from .reports import (load_log, load_world, report_from_runs, save_run, write_report)
from .simharness import ExperimentConfig, InfoLevel, replicate
from .synthgen import Scenario, ScenarioConfig

_logger = logging.getLogger("enrichrec")


def _policy_list(text: str):
    try:
        return [PolicyKind(p.strip()) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("estimation")
    g.add_argument("--alpha", type=float, default=0.5, help="weight of the rating loss (default 0.5)")
    g.add_argument("--epochs", type=int, default=300, help="maximum training epochs (default 300)")
    g.add_argument("--learning-rate", type=float, default=0.05, help="Adam step size (default 0.05)")
    g.add_argument("--l2", type=float, default=0.1, help="L2 penalty on free factors (default 0.1)")
    g.add_argument("--batch-size", type=int, default=512, help="minibatch size (default 512)")
    g.add_argument("--train-seed", type=int, default=0, help="training seed (default 0)")


def _train_config(args, **overrides) -> TrainConfig:
    return TrainConfig(alpha=args.alpha, epochs=args.epochs, learning_rate=args.learning_rate,
                       l2=args.l2, minibatch_size=args.batch_size, seed=args.train_seed,
                       latent_dim=getattr(args, "d", 3), **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enrichrec", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"enrichrec {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-run", help="run the synthetic simulation protocol")
    p.add_argument("--scenario", choices=[s.value for s in Scenario], default="enriching")
    p.add_argument("--info", choices=[i.value for i in InfoLevel], default="perfect",
                   help="perfect: policies see true scores; partial: policies use warm-up fits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--m", type=int, default=1000, help="users (default 1000)")
    p.add_argument("--n", type=int, default=250, help="items (default 250)")
    p.add_argument("--K", type=int, default=100, help="outside options (default 100)")
    p.add_argument("--d", type=int, default=3, help="latent dimension (default 3)")
    p.add_argument("--items", choices=["normal", "johnson"], default="normal",
                   help="distribution of the items' first components")
    p.add_argument("--replications", type=int, default=5)
    p.add_argument("--warmup-rounds", type=int, default=25)
    p.add_argument("--policy-rounds", type=int, default=50)
    p.add_argument("--slate-size", type=int, default=15)
    p.add_argument("--policies", type=_policy_list, default=None,
                   help="comma-separated policy names (default: greedy plus the four baselines)")
    p.add_argument("--bins", type=int, default=20, help="histogram bins per axis")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--save-runs", action="store_true", help="also write one run bundle per policy run")
    _add_train_flags(p)

    p = sub.add_parser("ml-run", help="MovieLens sandbox experiment")
    p.add_argument("--ratings", type=Path, required=True, help="path to ratings.csv")
    p.add_argument("--m-users", type=int, default=300)
    p.add_argument("--n-movies", type=int, default=200)
    p.add_argument("--ratings-per-user", type=int, default=25)
    p.add_argument("--resamples", type=int, default=5)
    p.add_argument("--d", type=int, default=3, help="latent dimension (default 3)")
    p.add_argument("--slate-size", type=int, default=15)
    p.add_argument("--rounds", type=int, default=50, help="simulated rounds (default 50)")
    p.add_argument("--min-train", type=int, default=32,
                   help="ratings needed before the reconstruction recommender is first fitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chunksize", type=int, default=2_000_000, help="rows per streamed chunk")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", type=Path, default=None)
    _add_train_flags(p)

    p = sub.add_parser("estimate", help="fit the joint model to a saved interaction log")
    p.add_argument("--log", type=Path, required=True, help="log file or run bundle")
    p.add_argument("--world", type=Path, default=None,
                   help="world file; supplies sizes, rating map and expected outside enrichment")
    p.add_argument("--n-users", type=int, default=None)
    p.add_argument("--n-items", type=int, default=None)
    p.add_argument("--d", type=int, default=3, help="latent dimension (default 3)")
    p.add_argument("--rating-map", choices=["identity", "stars"], default="identity",
                   help="score-to-rating map when no world is given")
    p.add_argument("--freeze-lambda-f", type=float, default=None)
    p.add_argument("--out", type=Path, required=True, help="model checkpoint (JSON)")
    _add_train_flags(p)

    p = sub.add_parser("report", help="metrics, CSV and histograms from run bundles")
    p.add_argument("runs", nargs="+", type=Path, help="run bundle files")
    p.add_argument("--scenario", default="unspecified", help="label for the CSV scenario column")
    p.add_argument("--info", default="unspecified", help="label for the CSV info_level column")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("demo-ratings", help="write a synthetic MovieLens-layout ratings file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--users", type=int, default=400)
    p.add_argument("--movies", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return getattr(value, "value", value)


def _echo(args) -> dict:
    """Parsed flags as JSON-friendly values."""
    return {k: _plain(v) for k, v in vars(args).items()}


def cmd_synth_run(args) -> int:
    scenario = ScenarioConfig(m=args.m, n=args.n, K=args.K, d=args.d, scenario=args.scenario,
                              item_distribution=args.items, seed=args.seed)
    config = ExperimentConfig(
        scenario=scenario, total_rounds=args.warmup_rounds + args.policy_rounds,
        warmup_rounds=args.warmup_rounds, policy_rounds=args.policy_rounds,
        slate_size=args.slate_size, replications=args.replications, policies=args.policies,
        info_level=args.info, seed=args.seed, train=_train_config(args), histogram_bins=args.bins,
    )
    out = args.out or Path(f"runs/synth-{args.scenario}-{args.info}-seed{args.seed}")
    report = replicate(config, keep_logs=args.save_runs)
    meta = {"cli": _echo(args), "version": __version__}
    paths = write_report(out, report, args.scenario, args.info, meta)
    if args.save_runs:
        for run in report.runs:
            save_run(out / "runs" / f"{run.policy.value}-rep{run.replication}.json", run,
                     config.warmup_rounds, meta)
    _print_summary(report)
    print(f"report written to {paths['json']}")
    return 0


def cmd_ml_run(args) -> int:
    from .movielens import SandboxConfig, run_movielens_experiment

    config = SandboxConfig(m_users=args.m_users, n_movies=args.n_movies,
                           ratings_per_user=args.ratings_per_user, resamples=args.resamples,
                           latent_dim=args.d, slate_size=args.slate_size, rounds=args.rounds,
                           seed=args.seed, min_train=args.min_train,
                           train=_train_config(args, freeze_lambda_f=1.0))
    report = run_movielens_experiment(args.ratings, config, histogram_bins=args.bins, chunksize=args.chunksize)
    out = args.out or Path(f"runs/movielens-seed{args.seed}")
    paths = write_report(out, report, "movielens", "estimated_as_perfect",
                         {"cli": _echo(args), "version": __version__})
    _print_summary(report)
    print(f"report written to {paths['json']}")
    return 0


def cmd_estimate(args) -> int:
    log = load_log(args.log)
    world = load_world(args.world) if args.world else None
    n_users = args.n_users or (world.n_users if world else int(log.user.max()) + 1)
    n_items = args.n_items or (world.n_items if world else int(max(log.slates.max(), log.chosen.max())) + 1)
    if world is not None:
        f_rating = world.f_rating
        eo = world.expected_outside_enrichment()
    else:
        f_rating = IdentityRating() if args.rating_map == "identity" else AffineClampRating()
        eo = np.zeros(n_users)
    dataset = Dataset.from_log(log, n_users, n_items)
    model = fit(dataset, _train_config(args, freeze_lambda_f=args.freeze_lambda_f), eo, f_rating)
    model.config = {**model.config, "cli": _echo(args), "version": __version__}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    model.save(args.out)
    print(f"fitted {n_users} users x {n_items} items in {len(model.history)} epochs; "
          f"mu={model.mu:.4f} sigma={model.sigma:.4f}; model written to {args.out}")
    return 0


def cmd_report(args) -> int:
    report = report_from_runs(args.runs, args.bins)
    paths = write_report(args.out, report, args.scenario, args.info, {"cli": _echo(args), "version": __version__})
    _print_summary(report)
    print(f"report written to {paths['json']}")
    return 0


def cmd_demo_ratings(args) -> int:
    from .movielens import synthetic_ratings, write_ratings

    table = synthetic_ratings(n_users=args.users, n_movies=args.movies, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_ratings(args.out, table)
    print(f"{len(table)} ratings written to {args.out}")
    return 0


def _print_summary(report) -> None:
    for policy in report.policies():
        print(f"{policy.value:18s} mean={report.mean(policy):10.3f} std={report.std(policy):8.3f}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for name in ("ratings", "log", "world"):
        path = getattr(args, name, None)
        if path is not None and not Path(path).is_file():
            parser.error(f"--{name}: file not found: {path}")
    try:
        if args.command == "synth-run":
            return cmd_synth_run(args)
        if args.command == "ml-run":
            return cmd_ml_run(args)
        if args.command == "estimate":
            return cmd_estimate(args)
        if args.command == "report":
            return cmd_report(args)
        return cmd_demo_ratings(args)
    except (EnrichrecError, ValueError) as exc:
        print(f"enrichrec: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
