"""Stage graph with content-hashed records.

Every stage writes ``<root>/stages/<stage>.json`` holding the hash of its own
parameters plus the hashes of its upstream records. A stage whose record
matches the current config is skipped ("cached"); a stage whose upstream
record is missing or stale refuses to run and names the stage to rerun.

Layout under the dataset root::

    manifest.json, data/, code_metadata.parquet
    tabularized/            schema.json, static/, time_series/
    tasks/<task>/           cached task shards
    models/<task>/          model.json, final_report.json, sweep_report.json
    stages/<stage>.json
"""

from __future__ import annotations

import json
import logging
import resource
import sys
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

from .config import Config, as_list
from .errors import ConfigError
from .event_store import CodeMetadata, ShardedDataset, describe
from .hashing import config_hash, file_sha256
from .io import atomic_write_json, read_json

log = logging.getLogger("sparsetab.pipeline")

STAGES = ("describe", "tabularize-static", "tabularize-time-series", "cache-task", "model")
UPSTREAM = {
    "describe": (),
    "tabularize-static": ("describe",),
    "tabularize-time-series": ("describe",),
    "cache-task": ("tabularize-static", "tabularize-time-series"),
    "model": ("cache-task",),
}


class StaleStageError(ConfigError):
    pass


def peak_rss_mb() -> float:
    kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    return kb / 1024.0 if sys.platform != "darwin" else kb / 1024.0 / 1024.0


class JsonLinesFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        payload.update(getattr(record, "fields", {}))
        return json.dumps(payload, sort_keys=True, default=str)


def emit(event: str, **fields) -> None:
    log.info(event, extra={"fields": {"event": event, **fields}})


# ---------------------------------------------------------------- stage parameters


def tab_config(cfg: Config):
    from .tabularizer import TabConfig

    allowed = as_list(cfg.get("tabularization.allowed_codes"))
    return TabConfig(
        windows=tuple(as_list(cfg["tabularization.windows"])),
        aggs=tuple(as_list(cfg["tabularization.aggs"])),
        allowed_codes=None if allowed is None else tuple(allowed),
        min_code_count=cfg.get("tabularization.min_code_inclusion_count"),
        max_included_codes=cfg.get("tabularization.max_included_codes"),
    )


def learner_params(cfg: Config) -> dict:
    return {k: v for k, v in cfg.section("model_params").items() if not k.startswith("iterator.")}


def task_name(cfg: Config) -> str:
    name = str(cfg["task.name"])
    if not name or "/" in name or name.startswith("."):
        raise ConfigError(f"bad task name {name!r}")
    return name


def stage_params(stage: str, cfg: Config, root: Path) -> dict:
    if stage == "describe":
        return {"dataset": ShardedDataset(root).manifest.created_config_hash}
    if stage in ("tabularize-static", "tabularize-time-series"):
        return {"tabularization": tab_config(cfg).to_dict()}
    if stage == "cache-task":
        labels = cfg.get("task.labels")
        if labels is None:
            raise ConfigError("cache-task needs task.labels (or --labels)")
        path = Path(labels)
        if not path.is_absolute() and not path.exists():
            path = root / path
        if not path.exists():
            raise ConfigError(f"label file not found: {labels}")
        return {
            "task": task_name(cfg),
            "labels_sha256": file_sha256(path) if path.is_file() else config_hash(sorted(str(p) for p in path.rglob("*"))),
            "mode": "at_or_before" if cfg.get("task.at_or_before") else "strict_before",
        }
    if stage == "model":
        return {
            "task": task_name(cfg),
            "learner": cfg["model.learner"],
            "sweep": bool(cfg["model.sweep"]),
            "budget": int(cfg["model.budget"]) if cfg["model.sweep"] else None,
            "seed": int(cfg["model.seed"]),
            "params": learner_params(cfg),
            "max_by_correlation": cfg.get("tabularization.max_by_correlation"),
            "min_correlation": cfg.get("tabularization.min_correlation"),
            "sweep_space": {k: v for k, v in cfg.section("sweep").items()} if cfg["model.sweep"] else None,
        }
    raise ConfigError(f"unknown stage {stage!r}")


def record_path(root: Path, stage: str, cfg: Config) -> Path:
    suffix = f"@{task_name(cfg)}" if stage in ("cache-task", "model") else ""
    return root / "stages" / f"{stage}{suffix}.json"


def stage_hash(stage: str, cfg: Config, root: Path) -> str:
    up = {u: stage_hash(u, cfg, root) for u in UPSTREAM[stage]}
    return config_hash({"stage": stage, "params": stage_params(stage, cfg, root), "upstream": up})


def _record(root: Path, stage: str, cfg: Config) -> dict | None:
    path = record_path(root, stage, cfg)
    if not path.exists():
        return None
    return read_json(path)


def check_upstream(stage: str, cfg: Config, root: Path) -> None:
    for up in UPSTREAM[stage]:
        rec = _record(root, up, cfg)
        if rec is None:
            raise StaleStageError(f"`{up}` has not been run for {root}; run `sparsetab {up} {root}` first")
        if rec["config_hash"] != stage_hash(up, cfg, root):
            raise StaleStageError(
                f"`{up}` output in {root} was built with a different configuration; rerun `sparsetab {up} {root}`"
            )


# ---------------------------------------------------------------- stage bodies


def _describe(root: Path, cfg: Config) -> dict:
    meta = describe(ShardedDataset(root))
    return {"n_codes": len(meta)}


def _schema(root: Path, cfg: Config):
    from .tabularizer import build_feature_schema

    return build_feature_schema(CodeMetadata.load(root), tab_config(cfg))


def _tab_static(root: Path, cfg: Config) -> dict:
    from .tabularizer.store import save_schema, write_static

    schema = _schema(root, cfg)
    out = root / "tabularized"
    save_schema(schema, out)
    write_static(ShardedDataset(root), schema, out)
    return {"n_columns": len(schema), "schema_hash": schema.schema_hash}


def _tab_ts(root: Path, cfg: Config) -> dict:
    from .tabularizer.store import save_schema, write_time_series

    schema = _schema(root, cfg)
    out = root / "tabularized"
    save_schema(schema, out)
    write_time_series(ShardedDataset(root), schema, out)
    return {"n_columns": len(schema), "schema_hash": schema.schema_hash}


def _cache_task(root: Path, cfg: Config) -> dict:
    from .task_cache import cache_task

    labels = Path(cfg["task.labels"])
    if not labels.is_absolute() and not labels.exists():
        labels = root / labels
    mode = "at_or_before" if cfg.get("task.at_or_before") else "strict_before"
    man = cache_task(root, root / "tabularized", labels, root / "tasks" / task_name(cfg), mode)
    return {k: man[k] for k in ("n_labels", "n_aligned", "n_dropped", "mode")}


def _model(root: Path, cfg: Config) -> dict:
    from .learner import TaskData
    from .tabularizer.store import load_schema
    from .task_cache import task_shard_dirs
    from .tuner import SearchSpace, run_single, run_sweep

    task = task_name(cfg)
    schema = load_schema(root / "tabularized")
    meta = CodeMetadata.load(root)
    data = TaskData.from_dirs(task_shard_dirs(root / "tasks" / task))
    memory_mode = "in_memory" if cfg["model_params.iterator.keep_data_in_memory"] else "external"
    out = root / "models" / task
    seed = int(cfg["model.seed"])
    tab = tab_config(cfg)
    if cfg["model.sweep"]:
        space = SearchSpace(
            windows=tab.windows,
            aggs=tab.aggs,
            min_code_count=tuple(cfg["sweep.min_code_inclusion_count"]),
            max_included_codes=tuple(cfg["sweep.max_included_codes"]),
            max_by_correlation=tuple(cfg["sweep.max_by_correlation"]),
            learner=cfg["model.learner"],
        )
        res = run_sweep(data, schema, meta, space, int(cfg["model.budget"]), seed, out, int(cfg["model.jobs"]), memory_mode)
        final = res.final_report
    else:
        trial = SearchSpace(windows=tab.windows, aggs=tab.aggs, learner=cfg["model.learner"]).default_trial()
        trial["params"].update(learner_params(cfg))
        trial["max_by_correlation"] = cfg.get("tabularization.max_by_correlation")
        trial["min_correlation"] = cfg.get("tabularization.min_correlation")
        final = run_single(data, schema, meta, trial, seed, out, memory_mode)
    return {"test_auroc": final["test_auroc"], "model_sha256": final["model_sha256"]}


BODIES: dict[str, Callable[[Path, Config], dict]] = {
    "describe": _describe,
    "tabularize-static": _tab_static,
    "tabularize-time-series": _tab_ts,
    "cache-task": _cache_task,
    "model": _model,
}


@dataclass
class StageOutcome:
    stage: str
    cached: bool
    config_hash: str
    summary: dict


def run_stage(stage: str, cfg: Config, root: str | Path, *, force: bool = False) -> StageOutcome:
    root = Path(root)
    if stage not in BODIES:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    check_upstream(stage, cfg, root)
    h = stage_hash(stage, cfg, root)
    rec = _record(root, stage, cfg)
    if rec is not None and rec["config_hash"] == h and not force:
        emit("stage", stage=stage, status="cached", config_hash=h)
        return StageOutcome(stage, True, h, rec.get("summary", {}))
    t0 = time.perf_counter()
    summary = BODIES[stage](root, cfg)
    wall = time.perf_counter() - t0
    atomic_write_json(
        record_path(root, stage, cfg),
        {"stage": stage, "config_hash": h, "params": stage_params(stage, cfg, root), "summary": summary},
    )
    emit("stage", stage=stage, status="built", config_hash=h, wall_time_s=round(wall, 4), peak_rss_mb=round(peak_rss_mb(), 1), **summary)
    return StageOutcome(stage, False, h, summary)


def run_pipeline(cfg: Config, root: str | Path) -> list[StageOutcome]:
    """All five stages in order; each one short-circuits when cached."""
    return [run_stage(s, cfg, root) for s in STAGES]
