"""Long-form event ingestion, subject sharding, and code metadata.

A dataset directory looks like::

    <root>/manifest.json
    <root>/data/shard_0000.parquet ...
    <root>/code_metadata.parquet        (written by :func:`describe`)

Timestamps are int64 UTC microseconds. Static observations carry no time.
"""

from __future__ import annotations

import datetime as _dt
import logging
import math
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.csv as pacsv
import pyarrow.parquet as pq

from .errors import ConfigError, DataError
from .hashing import config_hash, file_sha256, subject_hash
from .io import atomic_write_bytes, atomic_write_json, read_json

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
MANIFEST = "manifest.json"
CODE_METADATA = "code_metadata.parquet"

EVENT_SCHEMA = pa.schema(
    [
        pa.field("subject_id", pa.int64(), nullable=False),
        pa.field("time", pa.timestamp("us", tz="UTC")),
        pa.field("code", pa.string(), nullable=False),
        pa.field("numeric_value", pa.float64()),
    ]
)

_EPOCH = _dt.datetime(1970, 1, 1, tzinfo=_dt.timezone.utc)
_FRACTION = re.compile(r"^(?P<head>.*\d{2}:\d{2}:\d{2})\.(?P<frac>\d+)(?P<tail>.*)$")
_INTEGER = re.compile(r"^-?\d+$")


@dataclass(frozen=True)
class Event:
    subject_id: int
    time: int | None
    code: str
    numeric_value: float | None = None

    def __post_init__(self):
        if not self.code:
            raise DataError("event code must be non-empty")
        if self.numeric_value is not None and not math.isfinite(self.numeric_value):
            raise DataError(f"non-finite numeric_value for code {self.code!r}")


@dataclass
class EventShard:
    """Columnar events. ``time`` is meaningless where ``has_time`` is False;
    ``numeric_value`` is NaN where no value was recorded."""

    subject_id: np.ndarray
    time: np.ndarray
    has_time: np.ndarray
    code: np.ndarray
    numeric_value: np.ndarray

    def __len__(self) -> int:
        return len(self.subject_id)

    @classmethod
    def empty(cls) -> EventShard:
        return cls(
            np.zeros(0, np.int64),
            np.zeros(0, np.int64),
            np.zeros(0, bool),
            np.zeros(0, dtype=object),
            np.zeros(0, np.float64),
        )

    @classmethod
    def from_events(cls, events: Iterable[Event]) -> EventShard:
        events = list(events)
        if not events:
            return cls.empty()
        return cls(
            np.array([e.subject_id for e in events], dtype=np.int64),
            np.array([0 if e.time is None else e.time for e in events], dtype=np.int64),
            np.array([e.time is not None for e in events], dtype=bool),
            np.array([e.code for e in events], dtype=object),
            np.array([np.nan if e.numeric_value is None else e.numeric_value for e in events], dtype=np.float64),
        )

    def to_events(self) -> list[Event]:
        out = []
        for s, t, ht, c, v in zip(self.subject_id, self.time, self.has_time, self.code, self.numeric_value):
            out.append(Event(int(s), int(t) if ht else None, str(c), None if np.isnan(v) else float(v)))
        return out

    def take(self, idx: np.ndarray) -> EventShard:
        return EventShard(
            self.subject_id[idx], self.time[idx], self.has_time[idx], self.code[idx], self.numeric_value[idx]
        )

    @staticmethod
    def concat(parts: Sequence[EventShard]) -> EventShard:
        parts = [p for p in parts if len(p)]
        if not parts:
            return EventShard.empty()
        return EventShard(
            np.concatenate([p.subject_id for p in parts]),
            np.concatenate([p.time for p in parts]),
            np.concatenate([p.has_time for p in parts]),
            np.concatenate([p.code for p in parts]),
            np.concatenate([p.numeric_value for p in parts]),
        )

    @property
    def subjects(self) -> np.ndarray:
        return np.unique(self.subject_id)

    def sort_order(self) -> np.ndarray:
        """Stable order by (subject, static first, time, code)."""
        if len(self) == 0:
            return np.zeros(0, np.int64)
        _, code_rank = np.unique(self.code.astype(str), return_inverse=True)
        time_key = np.where(self.has_time, self.time, np.iinfo(np.int64).min)
        return np.lexsort((code_rank, time_key, self.has_time, self.subject_id))

    def sorted(self) -> EventShard:
        return self.take(self.sort_order())

    def is_sorted(self) -> bool:
        order = self.sort_order()
        return bool(np.array_equal(order, np.arange(len(self))))

    def to_arrow(self) -> pa.Table:
        value_mask = np.isnan(self.numeric_value)
        return pa.table(
            {
                "subject_id": pa.array(self.subject_id, pa.int64()),
                "time": pa.array(self.time, pa.int64(), mask=~self.has_time).cast(pa.timestamp("us", tz="UTC")),
                "code": pa.array(self.code.astype(str).tolist(), pa.string()),
                "numeric_value": pa.array(self.numeric_value, pa.float64(), mask=value_mask),
            },
            schema=EVENT_SCHEMA,
        )

    @classmethod
    def from_arrow(cls, table: pa.Table) -> EventShard:
        time = table.column("time").cast(pa.timestamp("us", tz="UTC")).cast(pa.int64())
        has_time = time.is_valid().to_numpy(zero_copy_only=False)
        value = table.column("numeric_value")
        return cls(
            table.column("subject_id").to_numpy().astype(np.int64),
            time.fill_null(0).to_numpy().astype(np.int64),
            np.asarray(has_time, dtype=bool),
            np.asarray(table.column("code").to_pylist(), dtype=object),
            value.fill_null(np.nan).to_numpy().astype(np.float64),
        )


@dataclass
class DatasetManifest:
    shard_paths: list[str]
    n_subjects: int
    n_events: int
    created_config_hash: str
    schema_version: str = SCHEMA_VERSION
    shard_subjects: list[int] = field(default_factory=list)
    shard_events: list[int] = field(default_factory=list)
    shard_count: int = 1
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "shard_paths": list(self.shard_paths),
            "n_subjects": self.n_subjects,
            "n_events": self.n_events,
            "shard_subjects": list(self.shard_subjects),
            "shard_events": list(self.shard_events),
            "shard_count": self.shard_count,
            "seed": self.seed,
            "created_config_hash": self.created_config_hash,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetManifest:
        m = cls(
            shard_paths=list(d["shard_paths"]),
            n_subjects=int(d["n_subjects"]),
            n_events=int(d["n_events"]),
            created_config_hash=d["created_config_hash"],
            schema_version=d.get("schema_version", SCHEMA_VERSION),
            shard_subjects=list(d.get("shard_subjects", [])),
            shard_events=list(d.get("shard_events", [])),
            shard_count=int(d.get("shard_count", len(d["shard_paths"]))),
            seed=int(d.get("seed", 0)),
            extra=dict(d.get("extra", {})),
        )
        m.validate()
        return m

    def validate(self) -> None:
        if self.shard_events and sum(self.shard_events) != self.n_events:
            raise DataError("manifest n_events does not equal the sum over shards")
        if self.shard_subjects and sum(self.shard_subjects) != self.n_subjects:
            raise DataError("manifest n_subjects does not equal the sum over shards")


class ShardedDataset:
    """A dataset root holding a manifest and subject-partitioned event shards."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest = DatasetManifest.from_dict(read_json(self.root / MANIFEST))

    def __len__(self) -> int:
        return len(self.manifest.shard_paths)

    @property
    def shard_names(self) -> list[str]:
        return [Path(p).stem for p in self.manifest.shard_paths]

    def shard_path(self, i: int) -> Path:
        return self.root / self.manifest.shard_paths[i]

    def load_shard(self, i: int) -> EventShard:
        path = self.shard_path(i)
        if not path.exists():
            raise DataError(f"missing shard file: {path}")
        return EventShard.from_arrow(pq.read_table(path))

    def shard_of(self, subject_ids: np.ndarray) -> np.ndarray:
        """Shard index each subject would be assigned to under this dataset's seed."""
        return assign_shards(subject_ids, self.manifest.shard_count, self.manifest.seed)


def assign_shards(subject_ids: np.ndarray, shard_count: int, seed: int) -> np.ndarray:
    if shard_count < 1:
        raise ConfigError("shard_count must be positive")
    h = subject_hash(np.asarray(subject_ids, dtype=np.int64), seed)
    return (h % np.uint64(shard_count)).astype(np.int64)


# ---------------------------------------------------------------- parsing


def parse_time_us(text: str | None) -> tuple[int | None, bool]:
    """Parse ISO-8601 or epoch-microsecond text to UTC micros.

    Returns ``(micros_or_None, truncated)``; ``truncated`` flags dropped
    sub-microsecond digits. Naive timestamps are taken as UTC.
    """
    if text is None:
        return None, False
    s = str(text).strip()
    if not s:
        return None, False
    if _INTEGER.match(s):
        return int(s), False
    truncated = False
    if s.endswith(("Z", "z")):
        s = s[:-1] + "+00:00"
    m = _FRACTION.match(s)
    if m:
        frac = m.group("frac")
        if len(frac) > 6:
            truncated = any(ch != "0" for ch in frac[6:])
            frac = frac[:6]
        s = f"{m.group('head')}.{frac.ljust(6, '0')}{m.group('tail')}"
    try:
        ts = _dt.datetime.fromisoformat(s)
    except ValueError as exc:
        raise ValueError(f"unparseable time {text!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=_dt.timezone.utc)
    return (ts - _EPOCH) // _dt.timedelta(microseconds=1), truncated


def _read_source(path: Path) -> pa.Table:
    if not path.exists():
        raise DataError(f"missing input file: {path}")
    if path.suffix.lower() in (".parquet", ".pq"):
        return pq.read_table(path)
    columns = ["subject_id", "time", "code", "numeric_value"]
    opts = pacsv.ConvertOptions(
        column_types={c: pa.string() for c in columns},
        strings_can_be_null=True,
        null_values=[""],
    )
    return pacsv.read_csv(path, convert_options=opts)


def _time_column(col: pa.ChunkedArray) -> tuple[list[int | None], list[bool]]:
    if pa.types.is_timestamp(col.type):
        if col.type.unit == "ns":
            raw = col.cast(pa.int64()).to_pylist()
            return [None if v is None else v // 1000 for v in raw], [v is not None and v % 1000 != 0 for v in raw]
        us = col.cast(pa.timestamp("us", tz=col.type.tz)).cast(pa.int64()).to_pylist()
        return us, [False] * len(us)
    if pa.types.is_integer(col.type):
        vals = col.to_pylist()
        return vals, [False] * len(vals)
    parsed = [parse_time_us(v) for v in col.cast(pa.string()).to_pylist()]
    return [p[0] for p in parsed], [p[1] for p in parsed]


def read_events(paths: Sequence[str | Path]) -> tuple[EventShard, list[dict]]:
    """Read long-form files in order, returning valid events and a row error report.

    Rows with a missing code or subject, or an unparseable field, land in the
    report. Rows with a non-finite value are dropped with a warning.
    """
    parts: list[EventShard] = []
    errors: list[dict] = []
    n_truncated = 0
    for raw_path in paths:
        path = Path(raw_path)
        table = _read_source(path)
        missing = {"subject_id", "code"} - set(table.column_names)
        if missing:
            raise DataError(f"{path}: missing required columns {sorted(missing)}")
        n = table.num_rows
        subj = table.column("subject_id").to_pylist()
        codes = table.column("code").cast(pa.string()).to_pylist()
        if "time" in table.column_names:
            try:
                times, trunc = _time_column(table.column("time"))
            except ValueError:
                times, trunc = [], []
                for v in table.column("time").cast(pa.string()).to_pylist():
                    try:
                        t, tr = parse_time_us(v)
                    except ValueError:
                        t, tr = "bad", False
                    times.append(t)
                    trunc.append(tr)
        else:
            times, trunc = [None] * n, [False] * n
        if "numeric_value" in table.column_names:
            values = table.column("numeric_value").cast(pa.string()).to_pylist()
        else:
            values = [None] * n

        keep_s, keep_t, keep_ht, keep_c, keep_v = [], [], [], [], []
        for i in range(n):
            row = i + 1
            code = codes[i]
            if code is None or code == "":
                errors.append({"file": str(path), "row": row, "reason": "missing code"})
                continue
            try:
                sid = int(subj[i])
            except (TypeError, ValueError):
                errors.append({"file": str(path), "row": row, "reason": f"bad subject_id {subj[i]!r}"})
                continue
            t = times[i]
            if t == "bad":
                errors.append({"file": str(path), "row": row, "reason": "unparseable time"})
                continue
            v = values[i]
            if v is None or v == "":
                val = np.nan
            else:
                try:
                    val = float(v)
                except ValueError:
                    errors.append({"file": str(path), "row": row, "reason": f"bad numeric_value {v!r}"})
                    continue
                if not math.isfinite(val):
                    log.warning("%s row %d: rejected non-finite numeric_value %r for code %r", path, row, v, code)
                    continue
            n_truncated += bool(trunc[i])
            keep_s.append(sid)
            keep_t.append(0 if t is None else int(t))
            keep_ht.append(t is not None)
            keep_c.append(code)
            keep_v.append(val)
        parts.append(
            EventShard(
                np.array(keep_s, dtype=np.int64),
                np.array(keep_t, dtype=np.int64),
                np.array(keep_ht, dtype=bool),
                np.array(keep_c, dtype=object),
                np.array(keep_v, dtype=np.float64),
            )
        )
    if n_truncated:
        log.warning("truncated sub-microsecond precision on %d timestamps", n_truncated)
    return EventShard.concat(parts), errors


# ---------------------------------------------------------------- sharding


def _write_parquet(table: pa.Table, path: Path) -> None:
    sink = pa.BufferOutputStream()
    pq.write_table(table, sink, compression="zstd")
    atomic_write_bytes(path, sink.getvalue().to_pybytes())


def write_dataset(
    events: EventShard,
    out_dir: str | Path,
    shard_count: int,
    seed: int,
    cfg_hash: str,
    extra: dict | None = None,
) -> ShardedDataset:
    """Partition ``events`` by seeded subject hash, sort each shard, write files and manifest."""
    out = Path(out_dir)
    assignment = assign_shards(events.subject_id, shard_count, seed)
    shard_paths, shard_subjects, shard_events = [], [], []
    for k in range(shard_count):
        part = events.take(np.flatnonzero(assignment == k)).sorted()
        rel = f"data/shard_{k:04d}.parquet"
        _write_parquet(part.to_arrow(), out / rel)
        shard_paths.append(rel)
        shard_subjects.append(int(len(part.subjects)))
        shard_events.append(int(len(part)))
    manifest = DatasetManifest(
        shard_paths=shard_paths,
        n_subjects=sum(shard_subjects),
        n_events=sum(shard_events),
        created_config_hash=cfg_hash,
        shard_subjects=shard_subjects,
        shard_events=shard_events,
        shard_count=shard_count,
        seed=seed,
        extra=extra or {},
    )
    manifest.validate()
    atomic_write_json(out / MANIFEST, manifest.to_dict())
    return ShardedDataset(out)


def _cached_dataset(out: Path, cfg_hash: str) -> ShardedDataset | None:
    path = out / MANIFEST
    if not path.exists():
        return None
    try:
        ds = ShardedDataset(out)
    except (DataError, KeyError, ValueError):
        return None
    if ds.manifest.created_config_hash != cfg_hash:
        return None
    if not all(ds.shard_path(i).exists() for i in range(len(ds))):
        return None
    return ds


def ingest(source_files: Sequence[str | Path], out_dir: str | Path, shard_count: int, seed: int = 0) -> ShardedDataset:
    """Validate, shard, and sort long-form inputs into ``out_dir``.

    Malformed rows are written to ``ingest_errors.json`` and raise
    :class:`DataError` after the whole input has been scanned.
    """
    if shard_count < 1:
        raise ConfigError("shard_count must be a positive integer")
    if not source_files:
        raise ConfigError("no input files given")
    out = Path(out_dir)
    cfg = {
        "stage": "ingest",
        "shard_count": int(shard_count),
        "seed": int(seed),
        "inputs": [file_sha256(p) if Path(p).exists() else str(p) for p in source_files],
    }
    h = config_hash(cfg)
    cached = _cached_dataset(out, h)
    if cached is not None:
        log.info("ingest cached (%s)", h[:12])
        return cached
    events, errors = read_events(source_files)
    if errors:
        atomic_write_json(out / "ingest_errors.json", {"n_errors": len(errors), "errors": errors})
        raise DataError(f"{len(errors)} malformed input rows; see {out / 'ingest_errors.json'}")
    return write_dataset(events, out, shard_count, seed, h)


# ---------------------------------------------------------------- describe


KIND_FLAGS = ("static_code", "static_value", "ts_code", "ts_value")


@dataclass
class CodeMetadata:
    """Per-code occurrence counts and kind flags, codes in lexicographic order."""

    codes: list[str]
    code_occurrences: np.ndarray
    value_occurrences: np.ndarray
    static_code: np.ndarray
    static_value: np.ndarray
    ts_code: np.ndarray
    ts_value: np.ndarray

    def __len__(self) -> int:
        return len(self.codes)

    @classmethod
    def empty(cls) -> CodeMetadata:
        z = np.zeros(0, np.int64)
        b = np.zeros(0, bool)
        return cls([], z, z.copy(), b, b.copy(), b.copy(), b.copy())

    def index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.codes)}

    def kinds(self, code: str) -> set[str]:
        i = self.index()[code]
        return {name for name in KIND_FLAGS if getattr(self, name)[i]}

    def counts(self) -> dict[str, int]:
        return dict(zip(self.codes, self.code_occurrences.tolist()))

    @property
    def is_static(self) -> np.ndarray:
        return self.static_code | self.static_value

    @property
    def is_timed(self) -> np.ndarray:
        return self.ts_code | self.ts_value

    def to_arrow(self) -> pa.Table:
        return pa.table(
            {
                "code": pa.array(self.codes, pa.string()),
                "code_occurrences": pa.array(self.code_occurrences, pa.int64()),
                "value_occurrences": pa.array(self.value_occurrences, pa.int64()),
                **{name: pa.array(getattr(self, name), pa.bool_()) for name in KIND_FLAGS},
            }
        )

    @classmethod
    def from_arrow(cls, table: pa.Table) -> CodeMetadata:
        return cls(
            table.column("code").to_pylist(),
            table.column("code_occurrences").to_numpy().astype(np.int64),
            table.column("value_occurrences").to_numpy().astype(np.int64),
            *(np.asarray(table.column(n).to_numpy(zero_copy_only=False), dtype=bool) for n in KIND_FLAGS),
        )

    @classmethod
    def load(cls, root: str | Path) -> CodeMetadata:
        path = Path(root) / CODE_METADATA
        if not path.exists():
            raise DataError(f"missing code metadata {path}; run `describe` first")
        return cls.from_arrow(pq.read_table(path))

    def save(self, root: str | Path) -> None:
        _write_parquet(self.to_arrow(), Path(root) / CODE_METADATA)


def _shard_code_counts(shard: EventShard) -> dict[str, np.ndarray]:
    """code -> [occurrences, value_occurrences, static_code, static_value, ts_code, ts_value]."""
    if len(shard) == 0:
        return {}
    codes, inv = np.unique(shard.code.astype(str), return_inverse=True)
    has_value = ~np.isnan(shard.numeric_value)
    k = len(codes)
    stats = np.zeros((k, 6), np.int64)
    stats[:, 0] = np.bincount(inv, minlength=k)
    stats[:, 1] = np.bincount(inv, weights=has_value, minlength=k).astype(np.int64)
    static = ~shard.has_time
    for col, mask in enumerate(
        (static & ~has_value, static & has_value, shard.has_time & ~has_value, shard.has_time & has_value), start=2
    ):
        stats[:, col] = np.bincount(inv[mask], minlength=k)
    return {c: stats[i] for i, c in enumerate(codes.tolist())}


def _merge_counts(per_shard: Iterable[dict[str, np.ndarray]]) -> CodeMetadata:
    total: dict[str, np.ndarray] = {}
    for counts in per_shard:
        for code, row in counts.items():
            if code in total:
                total[code] = total[code] + row
            else:
                total[code] = row.copy()
    if not total:
        return CodeMetadata.empty()
    codes = sorted(total)
    m = np.stack([total[c] for c in codes])
    return CodeMetadata(codes, m[:, 0], m[:, 1], *(m[:, j] > 0 for j in range(2, 6)))


def summarize_codes(shards: Iterable[EventShard]) -> CodeMetadata:
    """In-memory ``describe`` over already-loaded shards; nothing is written."""
    return _merge_counts(_shard_code_counts(s) for s in shards)


def describe(dataset: ShardedDataset | str | Path, *, shard_order: Sequence[int] | None = None) -> CodeMetadata:
    """Count code occurrences across all shards and persist ``code_metadata.parquet``."""
    if not isinstance(dataset, ShardedDataset):
        dataset = ShardedDataset(dataset)
    order = range(len(dataset)) if shard_order is None else shard_order
    for i in order:
        if not dataset.shard_path(i).exists():
            raise DataError(f"missing shard file: {dataset.shard_path(i)}")
    meta = _merge_counts(_shard_code_counts(dataset.load_shard(i)) for i in order)
    meta.save(dataset.root)
    return meta
