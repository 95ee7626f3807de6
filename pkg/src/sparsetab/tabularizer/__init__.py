"""Event shards to sparse wide matrices."""

from __future__ import annotations

from ..event_store import EventShard
from ..sparse import SparseShardMatrix, hstack
from .schema import (
    AGGS,
    Block,
    FeatureColumn,
    FeatureSchema,
    TabConfig,
    WindowSpec,
    build_feature_schema,
    parse_aggs,
    parse_windows,
)
from .static import tabularize_static
from .time_series import (
    RowIndex,
    aggregate_window,
    build_row_index,
    rolling_start_indices,
    tabularize_time_series,
    time_series_blocks,
)


def tabularize_shard(shard: EventShard, schema: FeatureSchema, *, blockwise: bool = False) -> SparseShardMatrix:
    """Static and time-series columns assembled in schema order."""
    rows = build_row_index(shard)
    static = tabularize_static(shard, schema, rows)
    ts = tabularize_time_series(shard, schema, blockwise=blockwise, rows=rows)
    return hstack([static, ts], schema.schema_hash)


__all__ = [
    "AGGS",
    "Block",
    "FeatureColumn",
    "FeatureSchema",
    "RowIndex",
    "TabConfig",
    "WindowSpec",
    "aggregate_window",
    "build_feature_schema",
    "build_row_index",
    "parse_aggs",
    "parse_windows",
    "rolling_start_indices",
    "tabularize_shard",
    "tabularize_static",
    "tabularize_time_series",
    "time_series_blocks",
]
