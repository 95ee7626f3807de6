"""On-disk layout of tabularized shards.

::

    <tab_dir>/schema.json
    <tab_dir>/static/<shard>/                      static columns
    <tab_dir>/time_series/<shard>/blocks/<key>/     one matrix per (window, agg)
    <tab_dir>/time_series/<shard>/assembled/        blocks concatenated in schema order

Each unit is claimed with a create-exclusive lock and written via atomic rename,
so several processes may work through the same directory.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from ..errors import DataError, InvariantError
from ..event_store import ShardedDataset
from ..io import atomic_write_json, claim, read_json
from ..sparse import SparseShardMatrix, hstack
from .schema import FeatureSchema
from .static import tabularize_static
from .time_series import RowIndex, build_row_index, time_series_blocks

log = logging.getLogger(__name__)

SCHEMA_FILE = "schema.json"


def save_schema(schema: FeatureSchema, tab_dir: str | Path) -> None:
    atomic_write_json(Path(tab_dir) / SCHEMA_FILE, schema.to_dict())


def load_schema(tab_dir: str | Path) -> FeatureSchema:
    return FeatureSchema.from_dict(read_json(Path(tab_dir) / SCHEMA_FILE))


def static_dir(tab_dir: Path, shard: str) -> Path:
    return Path(tab_dir) / "static" / shard


def ts_dir(tab_dir: Path, shard: str) -> Path:
    return Path(tab_dir) / "time_series" / shard


def write_static(dataset: ShardedDataset, schema: FeatureSchema, tab_dir: str | Path) -> None:
    tab_dir = Path(tab_dir)
    for i, name in enumerate(dataset.shard_names):
        out = static_dir(tab_dir, name)
        with claim(tab_dir / "locks" / f"static-{name}.lock") as mine:
            if not mine:
                log.info("static shard %s claimed elsewhere; skipping", name)
                continue
            tabularize_static(dataset.load_shard(i), schema).save(out)


def write_time_series(dataset: ShardedDataset, schema: FeatureSchema, tab_dir: str | Path) -> None:
    tab_dir = Path(tab_dir)
    for i, name in enumerate(dataset.shard_names):
        base = ts_dir(tab_dir, name)
        shard = dataset.load_shard(i)
        rows = build_row_index(shard)
        for block, m in time_series_blocks(shard, schema, rows):
            with claim(tab_dir / "locks" / f"ts-{name}-{block.key}.lock") as mine:
                if mine:
                    m.save(base / "blocks" / block.key)
        assemble_time_series(schema, base, rows)


def assemble_time_series(schema: FeatureSchema, base: Path, rows: RowIndex) -> SparseShardMatrix:
    parts = []
    for block in schema.ts_blocks:
        m = SparseShardMatrix.load(base / "blocks" / block.key)
        if m.schema_hash != schema.schema_hash:
            raise DataError(f"stale block {base / 'blocks' / block.key}: schema hash mismatch")
        parts.append(m)
    if parts:
        out = hstack(parts, schema.schema_hash)
    else:
        out = SparseShardMatrix(
            rows.n_rows, 0, np.zeros(rows.n_rows + 1), [], [], rows.subject, rows.time, schema.schema_hash
        )
    if out.n_rows != rows.n_rows:
        raise InvariantError("assembled rows disagree with the shard row index")
    out.save(base / "assembled")
    return out


def load_full(tab_dir: str | Path, shard: str, schema: FeatureSchema | None = None) -> SparseShardMatrix:
    """Static and time-series columns of one shard in schema order."""
    tab_dir = Path(tab_dir)
    schema = load_schema(tab_dir) if schema is None else schema
    static = SparseShardMatrix.load(static_dir(tab_dir, shard))
    ts = SparseShardMatrix.load(ts_dir(tab_dir, shard) / "assembled")
    for part, label in ((static, "tabularize-static"), (ts, "tabularize-time-series")):
        if part.schema_hash != schema.schema_hash:
            raise DataError(
                f"shard {shard}: {label} output was built for a different feature schema; rerun {label}"
            )
    return hstack([static, ts], schema.schema_hash)
