"""Time-series tabularization of one sorted event shard."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ..errors import InvariantError
from ..event_store import EventShard
from ..sparse import SparseShardMatrix, hstack
from . import kernels
from .schema import AGG_ID, Block, FeatureSchema, WindowSpec


@dataclass
class RowIndex:
    """Unique (subject, time) rows of a shard plus the event -> row map."""

    subject: np.ndarray  # per row
    time: np.ndarray  # per row
    subj_ptr: np.ndarray  # rows of subject k are subj_ptr[k]:subj_ptr[k+1]
    subjects: np.ndarray  # subject id per subject slot
    timed: np.ndarray  # positions of timed events in the shard
    event_row: np.ndarray  # row of each timed event

    @property
    def n_rows(self) -> int:
        return len(self.subject)


def build_row_index(shard: EventShard) -> RowIndex:
    if len(shard) and not shard.is_sorted():
        raise InvariantError("event shard is not in (subject, static-first, time, code) order")
    timed = np.flatnonzero(shard.has_time)
    s = shard.subject_id[timed]
    t = shard.time[timed]
    new_row = np.ones(len(timed), bool)
    if len(timed) > 1:
        new_row[1:] = (s[1:] != s[:-1]) | (t[1:] != t[:-1])
    event_row = np.cumsum(new_row) - 1
    row_subject = s[new_row]
    row_time = t[new_row]
    new_subj = np.ones(len(row_subject), bool)
    if len(row_subject) > 1:
        new_subj[1:] = row_subject[1:] != row_subject[:-1]
    subj_ptr = np.r_[np.flatnonzero(new_subj), len(row_subject)].astype(np.int64)
    return RowIndex(row_subject, row_time, subj_ptr, row_subject[new_subj], timed, event_row.astype(np.int64))


def rolling_start_indices(times: Sequence[int] | np.ndarray, window: WindowSpec | str) -> np.ndarray:
    """Start index per row of the window ``(t_i - w, t_i]`` for one subject."""
    times = np.asarray(times, dtype=np.int64)
    window = WindowSpec.parse(window)
    ptr = np.array([0, len(times)], np.int64)
    return kernels.rolling_starts(times, ptr, window.duration_us)


@dataclass
class Observations:
    """Events collapsed to one record per (row, code), grouped by (subject, code)."""

    row: np.ndarray
    cnt: np.ndarray
    vcnt: np.ndarray
    total: np.ndarray
    total_sq: np.ndarray
    vmin: np.ndarray
    vmax: np.ndarray
    grp_ptr: np.ndarray
    grp_code: np.ndarray
    grp_subj: np.ndarray

    def kernel_args(self):
        obs = (self.row, self.cnt, self.vcnt, self.total, self.total_sq, self.vmin, self.vmax)
        return obs, (self.grp_ptr, self.grp_code, self.grp_subj)


def collapse_observations(shard: EventShard, rows: RowIndex, vocab: Sequence[str]) -> Observations:
    lookup = {c: i for i, c in enumerate(vocab)}
    codes = shard.code[rows.timed]
    code_id = np.fromiter((lookup.get(c, -1) for c in codes), np.int64, count=len(codes))
    keep = code_id >= 0
    code_id = code_id[keep]
    ev_row = rows.event_row[keep]
    values = shard.numeric_value[rows.timed][keep]

    n_codes = max(len(vocab), 1)
    key = ev_row * n_codes + code_id  # already grouped by row; sort to (row, code)
    uniq, inv = np.unique(key, return_inverse=True)
    obs_row = uniq // n_codes
    obs_code = uniq % n_codes
    n = len(uniq)
    has = ~np.isnan(values)
    v = np.where(has, values, 0.0)
    cnt = np.bincount(inv, minlength=n).astype(np.int64)
    vcnt = np.bincount(inv, weights=has, minlength=n).astype(np.int64)
    total = np.zeros(n)
    total_sq = np.zeros(n)
    np.add.at(total, inv, v)
    np.add.at(total_sq, inv, v * v)
    vmin = np.full(n, np.inf)
    vmax = np.full(n, -np.inf)
    np.minimum.at(vmin, inv[has], values[has])
    np.maximum.at(vmax, inv[has], values[has])

    # subject slot of every row
    row_slot = np.repeat(np.arange(len(rows.subjects), dtype=np.int64), np.diff(rows.subj_ptr))
    obs_slot = row_slot[obs_row] if n else np.zeros(0, np.int64)
    order = np.lexsort((obs_row, obs_code, obs_slot))
    obs_row, obs_code, obs_slot = obs_row[order], obs_code[order], obs_slot[order]
    starts = np.ones(n, bool)
    if n > 1:
        starts[1:] = (obs_slot[1:] != obs_slot[:-1]) | (obs_code[1:] != obs_code[:-1])
    first = np.flatnonzero(starts)
    return Observations(
        np.ascontiguousarray(obs_row, np.int64),
        cnt[order],
        vcnt[order],
        total[order],
        total_sq[order],
        vmin[order],
        vmax[order],
        np.r_[first, n].astype(np.int64),
        obs_code[first].astype(np.int64),
        obs_slot[first].astype(np.int64),
    )


def _run_blocks(
    rows: RowIndex,
    obs: Observations,
    vocab: Sequence[str],
    blocks: Sequence[Block],
    col_base: Sequence[int],
    n_cols: int,
    schema_hash: str,
) -> SparseShardMatrix:
    """Aggregate ``blocks`` into one matrix; block b's columns start at ``col_base[b]``."""
    windows: list[WindowSpec] = []
    for b in blocks:
        if b.window not in windows:
            windows.append(b.window)
    starts2d = np.empty((len(windows), rows.n_rows), np.int64)
    for k, w in enumerate(windows):
        starts2d[k] = kernels.rolling_starts(rows.time, rows.subj_ptr, w.duration_us)

    lookup = {c: i for i, c in enumerate(vocab)}
    col_map = np.full((len(blocks), max(len(vocab), 1)), -1, np.int64)
    for bi, (b, base) in enumerate(zip(blocks, col_base)):
        for j, c in enumerate(b.codes):
            col_map[bi, lookup[c]] = base + j
    blk_win = np.array([windows.index(b.window) for b in blocks], np.int64)
    blk_agg = np.array([AGG_ID[b.agg] for b in blocks], np.int64)
    row_subj_end = np.ascontiguousarray(rows.subj_ptr[1:])
    obs_args, grp_args = obs.kernel_args()
    indptr, indices, data = kernels.window_blocks(
        rows.n_rows, row_subj_end, starts2d, obs_args, grp_args, (blk_win, blk_agg, col_map)
    )
    return SparseShardMatrix(rows.n_rows, n_cols, indptr, indices, data, rows.subject, rows.time, schema_hash)


def ts_vocabulary(schema: FeatureSchema) -> list[str]:
    return sorted({c for b in schema.ts_blocks for c in b.codes})


def time_series_blocks(
    shard: EventShard, schema: FeatureSchema, rows: RowIndex | None = None
) -> list[tuple[Block, SparseShardMatrix]]:
    """One matrix per (window, agg) block, columns local to the block."""
    rows = build_row_index(shard) if rows is None else rows
    vocab = ts_vocabulary(schema)
    obs = collapse_observations(shard, rows, vocab)
    return [(b, _run_blocks(rows, obs, vocab, [b], [0], b.n_cols, schema.schema_hash)) for b in schema.ts_blocks]


def tabularize_time_series(
    shard: EventShard, schema: FeatureSchema, *, blockwise: bool = False, rows: RowIndex | None = None
) -> SparseShardMatrix:
    """Time-series columns of ``schema`` (everything after the static section).

    ``blockwise=True`` computes each (window, agg) block separately and
    concatenates; the result is identical either way.
    """
    rows = build_row_index(shard) if rows is None else rows
    n_ts = len(schema) - schema.n_static
    if blockwise:
        parts = [m for _, m in time_series_blocks(shard, schema, rows)]
        if not parts:
            return _empty_like_rows(rows, 0, schema.schema_hash)
        return hstack(parts, schema.schema_hash)
    vocab = ts_vocabulary(schema)
    obs = collapse_observations(shard, rows, vocab)
    blocks = schema.ts_blocks
    base = [b.offset - schema.n_static for b in blocks]
    return _run_blocks(rows, obs, vocab, blocks, base, n_ts, schema.schema_hash)


def _empty_like_rows(rows: RowIndex, n_cols: int, schema_hash: str) -> SparseShardMatrix:
    return SparseShardMatrix(
        rows.n_rows,
        n_cols,
        np.zeros(rows.n_rows + 1, np.uint64),
        np.zeros(0, np.uint32),
        np.zeros(0, np.float32),
        rows.subject,
        rows.time,
        schema_hash,
    )


def aggregate_window(
    row_times: Sequence[int],
    obs_times: Sequence[int],
    obs_values: Sequence[float | None] | None,
    window: WindowSpec | str,
    agg: str,
) -> np.ndarray:
    """Dense per-row view of one code's window aggregate for one subject (NaN = no entry).

    Convenience wrapper over the shard kernels, mainly for inspection.
    """
    row_times = np.asarray(row_times, dtype=np.int64)
    obs_times = np.asarray(obs_times, dtype=np.int64)
    if obs_values is None:
        vals = np.full(len(obs_times), np.nan)
    else:
        vals = np.array([np.nan if v is None else v for v in obs_values], dtype=np.float64)
    all_times = np.union1d(row_times, obs_times)
    n = len(all_times) + len(obs_times)
    shard = EventShard(
        np.zeros(n, np.int64),
        np.r_[all_times, obs_times],
        np.ones(n, bool),
        np.array(["_"] * len(all_times) + ["X"] * len(obs_times), dtype=object),
        np.r_[np.full(len(all_times), np.nan), vals],
    ).sorted()
    w = WindowSpec.parse(window)
    schema = FeatureSchema((), 0, (Block(w, agg, 0, ("X",)),))
    (_, m), = time_series_blocks(shard, schema)
    dense = m.to_dense()[:, 0]
    return dense[np.searchsorted(all_times, row_times)]
