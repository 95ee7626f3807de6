"""Windows, aggregations, and the deterministic feature column layout."""

from __future__ import annotations

import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field

from ..errors import ConfigError
from ..hashing import config_hash

log = logging.getLogger(__name__)

UNIT_US = {"m": 60_000_000, "h": 3_600_000_000, "d": 86_400_000_000}
_WINDOW = re.compile(r"^(?P<n>\d+)(?P<unit>[mhd])$")

# canonical order; position doubles as the kernel agg id
AGGS = (
    "static/present",
    "static/first",
    "code/count",
    "code/present",
    "value/count",
    "value/sum",
    "value/sum_sqd",
    "value/min",
    "value/max",
    "value/mean",
)
AGG_ID = {name: i for i, name in enumerate(AGGS)}
STATIC_AGGS = AGGS[:2]
CODE_AGGS = AGGS[2:4]
VALUE_AGGS = AGGS[4:]
TS_AGGS = AGGS[2:]


@dataclass(frozen=True)
class WindowSpec:
    """A trailing window ``(t - w, t]``; ``count == 0`` means the full history."""

    count: int
    unit: str = "d"

    @classmethod
    def parse(cls, text: str | WindowSpec) -> WindowSpec:
        if isinstance(text, WindowSpec):
            return text
        s = str(text).strip().lower()
        if s in ("full", "all"):
            return cls(0, "full")
        m = _WINDOW.match(s)
        if not m:
            raise ConfigError(f"bad window {text!r}; use e.g. 30m, 12h, 7d or full")
        n = int(m["n"])
        if n <= 0:
            raise ConfigError(f"window duration must be positive: {text!r}")
        return cls(n, m["unit"])

    @property
    def is_full(self) -> bool:
        return self.unit == "full"

    @property
    def duration_us(self) -> int:
        """Window length in microseconds; -1 for the full history."""
        return -1 if self.is_full else self.count * UNIT_US[self.unit]

    def __str__(self) -> str:
        return "full" if self.is_full else f"{self.count}{self.unit}"


def parse_windows(windows: Sequence[str | WindowSpec] | str) -> list[WindowSpec]:
    if isinstance(windows, str):
        windows = [w for w in windows.split(",") if w.strip()]
    out = [WindowSpec.parse(w) for w in windows]
    durations = [w.duration_us for w in out]
    if len(set(durations)) != len(durations):
        raise ConfigError(f"duplicate windows in {[str(w) for w in out]}")
    return out


def parse_aggs(aggs: Sequence[str] | str) -> list[str]:
    if isinstance(aggs, str):
        aggs = [a for a in aggs.split(",") if a.strip()]
    out = []
    for a in aggs:
        a = a.strip()
        if a not in AGG_ID:
            raise ConfigError(f"unknown aggregation {a!r}; choose from {', '.join(AGGS)}")
        if a not in out:
            out.append(a)
    return sorted(out, key=AGG_ID.__getitem__)


@dataclass(frozen=True)
class FeatureColumn:
    code: str
    window: WindowSpec | None
    agg: str

    @property
    def name(self) -> str:
        if self.window is None:
            return f"{self.code}/{self.agg}"
        return f"{self.code}/{self.window}/{self.agg}"

    def to_dict(self) -> dict:
        return {"code": self.code, "window": None if self.window is None else str(self.window), "agg": self.agg}

    @classmethod
    def from_dict(cls, d: dict) -> FeatureColumn:
        w = d.get("window")
        return cls(d["code"], None if w is None else WindowSpec.parse(w), d["agg"])


@dataclass(frozen=True)
class Block:
    """A contiguous run of schema columns sharing one (window, agg)."""

    window: WindowSpec | None
    agg: str
    offset: int
    codes: tuple[str, ...]

    @property
    def n_cols(self) -> int:
        return len(self.codes)

    @property
    def key(self) -> str:
        w = "static" if self.window is None else str(self.window)
        return f"{w}__{self.agg.replace('/', '_')}"


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[FeatureColumn, ...]
    n_static: int
    blocks: tuple[Block, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.columns)

    @property
    def schema_hash(self) -> str:
        return config_hash([c.to_dict() for c in self.columns])

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def static_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.window is None]

    @property
    def ts_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.window is not None]

    @property
    def static_columns(self) -> tuple[FeatureColumn, ...]:
        return self.columns[: self.n_static]

    @property
    def ts_columns(self) -> tuple[FeatureColumn, ...]:
        return self.columns[self.n_static :]

    def to_dict(self) -> dict:
        return {
            "schema_hash": self.schema_hash,
            "n_static": self.n_static,
            "columns": [c.to_dict() for c in self.columns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSchema:
        cols = tuple(FeatureColumn.from_dict(c) for c in d["columns"])
        schema = cls(cols, int(d["n_static"]), _blocks_from_columns(cols))
        if "schema_hash" in d and d["schema_hash"] != schema.schema_hash:
            raise ConfigError("schema.json hash does not match its column list")
        return schema


def _blocks_from_columns(cols: Sequence[FeatureColumn]) -> tuple[Block, ...]:
    static = [c for c in cols if c.window is None]
    blocks = [Block(None, a, -1, tuple(c.code for c in static if c.agg == a)) for a in STATIC_AGGS]
    blocks = [b for b in blocks if b.codes]
    i = len(static)
    while i < len(cols):
        j = i
        while j < len(cols) and (cols[j].window, cols[j].agg) == (cols[i].window, cols[i].agg):
            j += 1
        blocks.append(Block(cols[i].window, cols[i].agg, i, tuple(c.code for c in cols[i:j])))
        i = j
    return tuple(blocks)


@dataclass(frozen=True)
class TabConfig:
    windows: tuple[str, ...] = ("1d", "7d", "30d", "full")
    aggs: tuple[str, ...] = ("static/present", "static/first", "code/count", "value/sum")
    allowed_codes: tuple[str, ...] | None = None
    min_code_count: int | None = None
    max_included_codes: int | None = None

    def to_dict(self) -> dict:
        return {
            "windows": [str(w) for w in parse_windows(self.windows)],
            "aggs": parse_aggs(self.aggs),
            "allowed_codes": None if self.allowed_codes is None else sorted(self.allowed_codes),
            "min_code_count": self.min_code_count,
            "max_included_codes": self.max_included_codes,
        }


def build_feature_schema(metadata, config: TabConfig) -> FeatureSchema:
    """Enumerate (code, window, agg) columns in canonical order.

    Static columns come first, grouped per code; then, for every window in
    configured order, one block per aggregation in canonical order, each
    listing its eligible codes lexicographically.
    """
    from ..feature_ops import filter_codes

    windows = parse_windows(config.windows)
    aggs = parse_aggs(config.aggs)
    ts_aggs = [a for a in aggs if a in TS_AGGS]
    if ts_aggs and not windows:
        raise ConfigError("time-series aggregations requested without any window")

    keep = filter_codes(
        metadata,
        allowed_codes=config.allowed_codes,
        min_code_count=config.min_code_count,
        max_included_codes=config.max_included_codes,
    )
    idx = metadata.index()
    codes = sorted(keep)

    def eligible(agg: str) -> list[str]:
        out = []
        for c in codes:
            i = idx[c]
            if agg == "static/present":
                ok = metadata.static_code[i] or metadata.static_value[i]
            elif agg == "static/first":
                ok = metadata.static_value[i]
            elif agg in CODE_AGGS:
                ok = metadata.ts_code[i] or metadata.ts_value[i]
            else:
                ok = metadata.ts_value[i]
                if not ok and metadata.ts_code[i]:
                    log.info("omitting %s for valueless code %s", agg, c)
            if ok:
                out.append(c)
        return out

    columns: list[FeatureColumn] = []
    static_aggs = [a for a in aggs if a in STATIC_AGGS]
    static_sets = {a: set(eligible(a)) for a in static_aggs}
    for c in codes:
        for a in static_aggs:
            if c in static_sets[a]:
                columns.append(FeatureColumn(c, None, a))
    n_static = len(columns)

    per_agg = {a: eligible(a) for a in ts_aggs}
    for w in windows:
        for a in ts_aggs:
            columns.extend(FeatureColumn(c, w, a) for c in per_agg[a])
    if len(columns) >= 2**32:
        raise ConfigError(f"schema has {len(columns)} columns; column indices must fit in 32 bits")
    return FeatureSchema(tuple(columns), n_static, _blocks_from_columns(columns))
