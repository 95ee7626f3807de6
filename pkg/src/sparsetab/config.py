"""Flat dotted-key configuration from JSON/YAML files plus ``key=value`` overrides."""

from __future__ import annotations

import json
import os
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError

DATA_ROOT_ENV = "SPARSETAB_DATA_ROOT"

DEFAULTS: dict[str, Any] = {
    "ingest.shards": 4,
    "ingest.seed": 0,
    "tabularization.windows": ["1d", "7d", "30d", "full"],
    "tabularization.aggs": ["static/present", "static/first", "code/count", "value/sum"],
    "tabularization.allowed_codes": None,
    "tabularization.min_code_inclusion_count": None,
    "tabularization.max_included_codes": None,
    "tabularization.max_by_correlation": None,
    "tabularization.min_correlation": None,
    "task.name": "task",
    "task.labels": None,
    "task.at_or_before": False,
    "model.learner": "gbdt",
    "model.sweep": False,
    "model.budget": 20,
    "model.seed": 0,
    "model.jobs": 1,
    "model_params.iterator.keep_data_in_memory": True,
    "sweep.max_by_correlation": [None],
    "sweep.min_code_inclusion_count": [None],
    "sweep.max_included_codes": [None],
}


def flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and v:
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{path}: top level must be a mapping")
    return flatten(raw)


def parse_overrides(pairs: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, text = item.partition("=")
        try:
            out[key.strip()] = yaml.safe_load(text) if text.strip() else None
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {item!r}: {exc}") from exc
    return out


def as_list(value) -> list | None:
    if value is None:
        return None
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return list(value)


class Config(dict):
    """Dotted keys over :data:`DEFAULTS`; unknown top-level sections are rejected."""

    SECTIONS = {"ingest", "tabularization", "task", "model", "model_params", "sweep", "synth", "data_root", "bench"}

    @classmethod
    def build(cls, file: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
        cfg = cls(DEFAULTS)
        if file is not None:
            cfg.update(load_file(file))
        if overrides:
            cfg.update(overrides)
        for key in cfg:
            if key.split(".")[0] not in cls.SECTIONS:
                raise ConfigError(f"unknown config key {key!r}")
        return cfg

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.items() if k.startswith(p)}

    def data_root(self, cli_value: str | None = None) -> Path:
        root = cli_value or self.get("data_root") or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(f"no dataset directory given; pass one or set {DATA_ROOT_ENV}")
        return Path(root)
