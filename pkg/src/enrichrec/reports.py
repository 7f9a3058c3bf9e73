"""Versioned JSON/CSV persistence for worlds, logs, run bundles and reports.

Every JSON document carries a ``format`` field ``"enrichrec.<kind>/<version>"``.
Floats are written with Python's shortest round-trip repr, so arrays survive a
save/load cycle bit for bit.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import OUTSIDE, InteractionLog, World, rating_map_from_dict
from .errors import InputError
from .estimation import EstimatedModel
from .policies import PolicyKind
from .simharness import (MetricsReport, PolicyRun, consumed_pairs, histograms_for,
                         overall_individual_enrichment)

WORLD_FORMAT = "enrichrec.world/1"
LOG_FORMAT = "enrichrec.log/1"
RUN_FORMAT = "enrichrec.run/1"
REPORT_FORMAT = "enrichrec.report/1"

METRIC_COLUMNS = ("scenario", "info_level", "policy", "replication", "metric", "value")
HISTOGRAM_COLUMNS = ("policy", "u_low", "u_high", "v_low", "v_high", "count")


def _check_format(data: dict, expected: str) -> None:
    if not isinstance(data, dict) or data.get("format") != expected:
        found = data.get("format") if isinstance(data, dict) else type(data).__name__
        raise InputError(f"expected format {expected!r}, found {found!r}")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def _write_json(path, data: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if hasattr(obj, "value"):  # enums
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# ---------------------------------------------------------------------------
# worlds and logs


def world_to_dict(world: World) -> dict:
    return {
        "format": WORLD_FORMAT,
        "user_a": world.user_a.tolist(),
        "user_b": world.user_b.tolist(),
        "lambda_c": world.lambda_c.tolist(),
        "lambda_f": world.lambda_f.tolist(),
        "item_x": world.item_x.tolist(),
        "item_y": world.item_y.tolist(),
        "outside_x": world.outside_x.tolist(),
        "outside_y": world.outside_y.tolist(),
        "availability": world.availability.tolist(),
        "consumed": [sorted(s) for s in world.consumed],
        "round": int(world.round),
        "seed": world.seed,
        "f_rating": world.f_rating.to_dict(),
        "metadata": json.loads(json.dumps(world.metadata, default=_jsonable)),
    }


def world_from_dict(data: dict) -> World:
    _check_format(data, WORLD_FORMAT)
    return World(
        user_a=data["user_a"], user_b=data["user_b"],
        lambda_c=data["lambda_c"], lambda_f=data["lambda_f"],
        item_x=data["item_x"], item_y=data["item_y"],
        outside_x=data["outside_x"], outside_y=data["outside_y"],
        availability=data["availability"],
        consumed=[set(s) for s in data["consumed"]],
        round=data.get("round", 0), seed=data.get("seed"),
        f_rating=rating_map_from_dict(data.get("f_rating", {})),
        metadata=data.get("metadata", {}),
    )


def save_world(path, world: World) -> None:
    _write_json(path, world_to_dict(world))


def load_world(path) -> World:
    return world_from_dict(_read_json(path))


def log_to_dict(log: InteractionLog) -> dict:
    return {"format": LOG_FORMAT, **log.to_dict()}


def log_from_dict(data: dict) -> InteractionLog:
    _check_format(data, LOG_FORMAT)
    return InteractionLog.from_dict(data)


def save_log(path, log: InteractionLog) -> None:
    _write_json(path, log_to_dict(log))


def load_log(path) -> InteractionLog:
    """Read a log file, or the log stored inside a run bundle."""
    data = _read_json(path)
    if isinstance(data, dict) and data.get("format") == RUN_FORMAT:
        return log_from_dict(data["log"])
    return log_from_dict(data)


# ---------------------------------------------------------------------------
# run bundles: one policy run with the environment needed to score it


def environment_to_dict(env) -> dict:
    if isinstance(env, World):
        return world_to_dict(env)
    model = getattr(env, "model", None)
    if isinstance(model, EstimatedModel):
        return {**model.to_dict(), "consumed": [sorted(s) for s in env.consumed]}
    raise InputError(f"cannot serialise environment of type {type(env).__name__}")


def environment_from_dict(data: dict):
    if data.get("format") == WORLD_FORMAT:
        return world_from_dict(data)
    from .movielens import SandboxWorld  # local import: movielens depends on this module's peers

    model = EstimatedModel.from_dict({k: v for k, v in data.items() if k != "consumed"})
    consumed = [set(s) for s in data.get("consumed", [])]
    return SandboxWorld(model, consumed or [set() for _ in range(model.n_users)])


def save_run(path, run: PolicyRun, policy_start_round: int, metadata: Optional[dict] = None) -> None:
    if run.log is None or run.world is None:
        raise InputError("run bundles need the run's log and environment (keep_logs=True)")
    _write_json(path, {
        "format": RUN_FORMAT,
        "policy": run.policy.value,
        "replication": int(run.replication),
        "policy_start_round": int(policy_start_round),
        "log": log_to_dict(run.log),
        "environment": environment_to_dict(run.world),
        "metadata": metadata or {},
    })


def load_run(path) -> tuple:
    """Returns ``(policy, replication, policy_start_round, log, environment, metadata)``."""
    data = _read_json(path)
    _check_format(data, RUN_FORMAT)
    return (PolicyKind(data["policy"]), int(data["replication"]), int(data["policy_start_round"]),
            log_from_dict(data["log"]), environment_from_dict(data["environment"]),
            data.get("metadata", {}))


def report_from_runs(paths: Sequence, bins: int = 20) -> MetricsReport:
    """Recompute metrics from saved run bundles (policy-round rows only)."""
    runs = []
    for path in paths:
        policy, rep, start, log, env, _ = load_run(path)
        log = log.select(log.round >= start)
        runs.append(PolicyRun(policy=policy, replication=rep,
                              enrichment=overall_individual_enrichment(log, env),
                              pairs=consumed_pairs(log, env),
                              on_platform=int(np.sum(log.chosen != OUTSIDE))))
    return MetricsReport(config={"sources": [str(p) for p in paths]}, runs=runs,
                         histograms=histograms_for(runs, bins), runtime_seconds=0.0)


# ---------------------------------------------------------------------------
# reports


def report_to_dict(report: MetricsReport, scenario: str, info_level: str,
                   metadata: Optional[dict] = None) -> dict:
    return {
        "format": REPORT_FORMAT,
        "scenario": scenario,
        "info_level": info_level,
        "config": report.config,
        "summary": report.summary(),
        "runs": [
            {"policy": r.policy.value, "replication": r.replication,
             "overall_individual_enrichment": r.enrichment, "on_platform_consumptions": r.on_platform}
            for r in report.runs
        ],
        "histograms": {
            p.value: {"counts": h.counts.tolist(), "u_edges": h.u_edges.tolist(), "v_edges": h.v_edges.tolist()}
            for p, h in report.histograms.items()
        },
        "runtime_seconds": report.runtime_seconds,
        "metadata": {**report.metadata, **(metadata or {})},
    }


def write_metrics_csv(path, report: MetricsReport, scenario: str, info_level: str) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(report.long_rows(scenario, info_level))


def write_histograms_csv(path, report: MetricsReport) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTOGRAM_COLUMNS)
        for policy, hist in report.histograms.items():
            for row in hist.rows():
                writer.writerow((policy.value, *row))


def write_report(out_dir, report: MetricsReport, scenario: str, info_level: str,
                 metadata: Optional[dict] = None) -> dict:
    """Write ``report.json``, ``metrics.csv`` and ``histograms.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "report.json", "metrics": out / "metrics.csv", "histograms": out / "histograms.csv"}
    _write_json(paths["json"], report_to_dict(report, scenario, info_level, metadata))
    write_metrics_csv(paths["metrics"], report, scenario, info_level)
    write_histograms_csv(paths["histograms"], report)
    return paths


def load_report(path) -> dict:
    data = _read_json(path)
    _check_format(data, REPORT_FORMAT)
    return data
