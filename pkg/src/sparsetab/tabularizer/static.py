"""Static features replicated onto every event row of their subject."""

from __future__ import annotations

import numpy as np

from ..event_store import EventShard
from ..sparse import SparseShardMatrix
from .schema import FeatureSchema
from .time_series import RowIndex, build_row_index


def tabularize_static(shard: EventShard, schema: FeatureSchema, rows: RowIndex | None = None) -> SparseShardMatrix:
    """``static/present`` = 1.0 when the subject has the code; ``static/first`` =
    the first recorded value in shard sort order."""
    rows = build_row_index(shard) if rows is None else rows
    col_of = {(c.code, c.agg): i for i, c in enumerate(schema.static_columns)}

    static = np.flatnonzero(~shard.has_time)
    ent_subj, ent_col, ent_val = [], [], []
    seen = set()
    for k in static:
        s, code, v = int(shard.subject_id[k]), shard.code[k], shard.numeric_value[k]
        col = col_of.get((code, "static/present"))
        if col is not None and (s, col) not in seen:
            seen.add((s, col))
            ent_subj.append(s), ent_col.append(col), ent_val.append(1.0)
        col = col_of.get((code, "static/first"))
        if col is not None and not np.isnan(v) and (s, col) not in seen:
            seen.add((s, col))
            ent_subj.append(s), ent_col.append(col), ent_val.append(v)

    ent_subj = np.array(ent_subj, np.int64)
    ent_col = np.array(ent_col, np.int64)
    ent_val = np.array(ent_val, np.float64)
    order = np.lexsort((ent_col, ent_subj))
    ent_subj, ent_col, ent_val = ent_subj[order], ent_col[order], ent_val[order]

    # per subject slot of the row index: entry range [a, b)
    a = np.searchsorted(ent_subj, rows.subjects, side="left")
    b = np.searchsorted(ent_subj, rows.subjects, side="right")
    per_subject = b - a
    n_rows_subj = np.diff(rows.subj_ptr)
    row_len = np.repeat(per_subject, n_rows_subj)
    indptr = np.zeros(rows.n_rows + 1, np.int64)
    np.cumsum(row_len, out=indptr[1:])
    row_a = np.repeat(a, n_rows_subj)
    src = np.repeat(row_a - indptr[:-1], row_len) + np.arange(indptr[-1])
    return SparseShardMatrix(
        rows.n_rows,
        schema.n_static,
        indptr,
        ent_col[src],
        ent_val[src],
        rows.subject,
        rows.time,
        schema.schema_hash,
    )
