"""Label alignment and task-specific shard caching.

Each label is matched to the latest tabularized row of its subject whose time
is strictly before the prediction time (or at/before, when opted in). Only
matched rows are kept, in label order, one per label.

Task directory layout::

    <task_dir>/task_manifest.json
    <task_dir>/drop_report.json
    <task_dir>/<shard>/  matrix files + labels.bin (u8) + alignment.parquet
"""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.parquet as pq

from .errors import ConfigError, DataError
from .event_store import ShardedDataset
from .io import atomic_dir, atomic_write_bytes, atomic_write_json, read_json
from .sparse import SparseShardMatrix
from .tabularizer.store import load_full, load_schema

log = logging.getLogger(__name__)

MODES = ("strict_before", "at_or_before")
REASON_NO_PRIOR = "no_prior_event"
REASON_NO_SUBJECT = "subject_not_in_shard"


@dataclass(frozen=True)
class LabelRecord:
    subject_id: int
    prediction_time: int
    label: bool


@dataclass
class Labels:
    """Columnar labels sorted by (subject, prediction_time), one per pair."""

    subject_id: np.ndarray
    prediction_time: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.subject_id)

    @classmethod
    def from_records(cls, records: Sequence[LabelRecord]) -> Labels:
        return cls.build(
            np.array([r.subject_id for r in records], np.int64),
            np.array([r.prediction_time for r in records], np.int64),
            np.array([bool(r.label) for r in records], bool),
        )

    @classmethod
    def build(cls, subject_id, prediction_time, label) -> Labels:
        s = np.asarray(subject_id, np.int64)
        t = np.asarray(prediction_time, np.int64)
        y = np.asarray(label, bool)
        order = np.lexsort((t, s))
        s, t, y = s[order], t[order], y[order]
        dup = np.zeros(len(s), bool)
        if len(s) > 1:
            dup[1:] = (s[1:] == s[:-1]) & (t[1:] == t[:-1])
        if dup.any():
            prev = np.flatnonzero(dup) - 1
            # runs of duplicates: compare each to its predecessor
            if np.any(y[dup] != y[prev]):
                k = int(np.flatnonzero(dup & np.r_[False, y[1:] != y[:-1]])[0])
                raise DataError(
                    f"conflicting labels for subject {s[k]} at prediction time {t[k]}; fix the label file"
                )
            log.warning("dropping %d duplicate label rows with agreeing labels", int(dup.sum()))
        keep = ~dup
        return cls(s[keep], t[keep], y[keep])

    def take(self, idx: np.ndarray) -> Labels:
        return Labels(self.subject_id[idx], self.prediction_time[idx], self.label[idx])


def _np(col, dtype) -> np.ndarray:
    if isinstance(col, pa.Array):
        col = pa.chunked_array([col])
    return np.asarray(col.to_numpy(), dtype=dtype)


def read_labels(path: str | Path) -> Labels:
    """Label table (parquet or CSV, or a directory of them) with subject_id, prediction_time, label."""
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.suffix in (".parquet", ".csv")) if path.is_dir() else [path]
    if not files:
        raise DataError(f"no label files found under {path}")
    tables = []
    for f in files:
        if not f.exists():
            raise DataError(f"missing label file: {f}")
        if f.suffix == ".csv":
            import pyarrow.csv as pacsv

            t = pacsv.read_csv(f)
        else:
            t = pq.read_table(f)
        missing = {"subject_id", "prediction_time", "label"} - set(t.column_names)
        if missing:
            raise DataError(f"{f}: label table lacks columns {sorted(missing)}")
        tables.append(t.select(["subject_id", "prediction_time", "label"]))
    subj, times, labels = [], [], []
    for t in tables:
        col = t.column("prediction_time")
        if pa.types.is_timestamp(col.type):
            col = col.cast(pa.timestamp("us", tz="UTC")).cast(pa.int64())
        elif pa.types.is_string(col.type) or pa.types.is_large_string(col.type):
            from .event_store import parse_time_us

            col = pa.array([parse_time_us(v)[0] for v in col.to_pylist()], pa.int64())
        if col.null_count:
            raise DataError("prediction_time must be present on every label")
        y = t.column("label")
        if not pa.types.is_boolean(y.type):
            vals = pc.cast(y, pa.int64()).to_numpy()
            if not np.isin(vals, (0, 1)).all():
                raise DataError("labels must be binary (0/1 or true/false)")
            y = pa.array(vals.astype(bool))
        subj.append(_np(t.column("subject_id"), np.int64))
        times.append(_np(col, np.int64))
        labels.append(_np(y, bool))
    return Labels.build(np.concatenate(subj), np.concatenate(times), np.concatenate(labels))


@dataclass
class Alignment:
    """``row[k]`` is the matched row of label k, or -1 with ``reason[k]`` set."""

    row: np.ndarray
    reason: list[str | None]

    @property
    def aligned(self) -> np.ndarray:
        return np.flatnonzero(self.row >= 0)

    @property
    def dropped(self) -> list[tuple[int, str]]:
        return [(k, r) for k, r in enumerate(self.reason) if r is not None]


def align_labels(labels: Labels, row_subject: np.ndarray, row_time: np.ndarray, mode: str = "strict_before") -> Alignment:
    """Latest row of the same subject with time < prediction_time (strict) or <=."""
    if mode not in MODES:
        raise ConfigError(f"unknown alignment mode {mode!r}; use {' or '.join(MODES)}")
    row_subject = np.asarray(row_subject, np.int64)
    row_time = np.asarray(row_time, np.int64)
    n_rows, n_lab = len(row_subject), len(labels)
    # merge rows and labels; at equal (subject, time) strict mode puts labels first
    label_rank = 0 if mode == "strict_before" else 1
    subj = np.r_[row_subject, labels.subject_id]
    time = np.r_[row_time, labels.prediction_time]
    kind = np.r_[np.full(n_rows, 1 - label_rank), np.full(n_lab, label_rank)]
    order = np.lexsort((kind, time, subj))
    is_row = order < n_rows
    pos = np.where(is_row, order, -1)
    last_row = np.maximum.accumulate(np.where(is_row, np.arange(len(order)), -1)) if len(order) else pos
    cand = np.where(last_row >= 0, order[np.maximum(last_row, 0)], -1)
    cand_subj = np.where(cand >= 0, subj[np.maximum(cand, 0)], -1)
    lab_at = ~is_row
    lab_idx = order[lab_at] - n_rows
    match = cand[lab_at]
    same = (match >= 0) & (cand_subj[lab_at] == labels.subject_id[lab_idx])
    row = np.full(n_lab, -1, np.int64)
    row[lab_idx[same]] = match[same]
    present = np.isin(labels.subject_id, row_subject)
    reason = [
        None if row[k] >= 0 else (REASON_NO_PRIOR if present[k] else REASON_NO_SUBJECT) for k in range(n_lab)
    ]
    return Alignment(row, reason)


@dataclass
class TaskShard:
    X: SparseShardMatrix
    y: np.ndarray
    prediction_time: np.ndarray

    def __post_init__(self):
        if not (len(self.y) == self.X.n_rows == len(self.prediction_time)):
            raise DataError("task shard lengths disagree")

    def save(self, directory: str | Path) -> None:
        self.X.validate()
        with atomic_dir(directory) as tmp:
            self.X.write_into(tmp)
            atomic_write_bytes(tmp / "labels.bin", self.y.astype(np.uint8).tobytes())
            table = pa.table(
                {
                    "subject_id": pa.array(self.X.row_subject, pa.int64()),
                    "event_time": pa.array(self.X.row_time, pa.int64()).cast(pa.timestamp("us", tz="UTC")),
                    "prediction_time": pa.array(self.prediction_time, pa.int64()).cast(
                        pa.timestamp("us", tz="UTC")
                    ),
                }
            )
            sink = pa.BufferOutputStream()
            pq.write_table(table, sink, compression="zstd")
            atomic_write_bytes(tmp / "alignment.parquet", sink.getvalue().to_pybytes())

    @classmethod
    def load(cls, directory: str | Path, *, mmap: bool = False) -> TaskShard:
        directory = Path(directory)
        X = SparseShardMatrix.load(directory, mmap=mmap)
        y = np.fromfile(directory / "labels.bin", dtype=np.uint8).astype(bool)
        al = pq.read_table(directory / "alignment.parquet")
        pt = al.column("prediction_time").cast(pa.int64()).to_numpy().astype(np.int64)
        return cls(X, y, pt)


def build_task_shard(X: SparseShardMatrix, labels: Labels, mode: str) -> tuple[TaskShard, Alignment]:
    al = align_labels(labels, X.row_subject, X.row_time, mode)
    keep = al.aligned
    return TaskShard(X.take_rows(al.row[keep]), labels.label[keep], labels.prediction_time[keep]), al


def cache_task(
    dataset_dir: str | Path,
    tab_dir: str | Path,
    labels_path: str | Path,
    out_dir: str | Path,
    mode: str = "strict_before",
) -> dict:
    """Write aligned task shards for every dataset shard; returns the task manifest."""
    ds = ShardedDataset(dataset_dir)
    schema = load_schema(tab_dir)
    labels = read_labels(labels_path)
    out_dir = Path(out_dir)
    shard_of = ds.shard_of(labels.subject_id)
    shards, reasons = [], Counter()
    n_aligned = 0
    for i, name in enumerate(ds.shard_names):
        X = load_full(tab_dir, name, schema)
        task, al = build_task_shard(X, labels.take(np.flatnonzero(shard_of == i)), mode)
        task.save(out_dir / name)
        reasons.update(r for _, r in al.dropped)
        n_aligned += task.X.n_rows
        shards.append({"name": name, "n_rows": task.X.n_rows, "n_dropped": len(al.dropped)})
    n_dropped = sum(reasons.values())
    if n_aligned + n_dropped != len(labels):
        raise DataError("label conservation violated during task caching")
    report = {"n_labels": len(labels), "n_aligned": n_aligned, "n_dropped": n_dropped, "reasons": dict(sorted(reasons.items()))}
    atomic_write_json(out_dir / "drop_report.json", report)
    manifest = {
        "mode": mode,
        "schema_hash": schema.schema_hash,
        "n_cols": len(schema),
        "shards": shards,
        **report,
    }
    atomic_write_json(out_dir / "task_manifest.json", manifest)
    if n_dropped:
        log.warning("%d of %d labels had no qualifying event row", n_dropped, len(labels))
    return manifest


def task_shard_dirs(task_dir: str | Path) -> list[Path]:
    task_dir = Path(task_dir)
    manifest = read_json(task_dir / "task_manifest.json")
    return [task_dir / s["name"] for s in manifest["shards"]]
