"""Slow, obviously-correct reference implementations used by the tests."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from sparsetab.event_store import Event, EventShard

DAY = 86_400_000_000


def random_micro_events(rng: np.random.Generator, max_subjects=5, max_events=50, max_codes=10) -> list[Event]:
    """A tiny messy dataset: repeated times, static rows, missing and cancelling values."""
    n_subj = int(rng.integers(1, max_subjects + 1))
    n_codes = int(rng.integers(1, max_codes + 1))
    n_events = int(rng.integers(1, max_events + 1))
    codes = [f"C{i}" for i in range(n_codes)]
    valued = rng.random(n_codes) < 0.6
    events = []
    for _ in range(n_events):
        s = int(rng.integers(n_subj))
        c = int(rng.integers(n_codes))
        static = rng.random() < 0.1
        t = None if static else int(rng.integers(0, 20)) * DAY // 2 + int(rng.integers(0, 3))
        v = None
        if valued[c] and rng.random() < 0.8:
            v = float(rng.choice([-2.5, -1.0, 0.0, 1.0, 2.5, 3.25, 100.0]))
        events.append(Event(s, t, codes[c], v))
    return events


def dense_rows(events: list[Event]) -> list[tuple[int, int]]:
    return sorted({(e.subject_id, e.time) for e in events if e.time is not None})


def dense_value(events: list[Event], subject: int, t: int, column) -> float:
    """One cell of the wide table, computed from scratch (NaN = no entry)."""
    if column.agg.startswith("static/"):
        hits = [e for e in events if e.subject_id == subject and e.time is None and e.code == column.code]
        if not hits:
            return math.nan
        if column.agg == "static/present":
            return 1.0
        vals = [e.numeric_value for e in hits if e.numeric_value is not None]
        return vals[0] if vals else math.nan

    def inside(e):
        if e.subject_id != subject or e.time is None or e.code != column.code or e.time > t:
            return False
        return column.window.is_full or e.time > t - column.window.duration_us

    hits = [e for e in events if inside(e)]
    vals = [e.numeric_value for e in hits if e.numeric_value is not None]
    agg = column.agg
    if agg == "code/count":
        return float(len(hits)) if hits else math.nan
    if agg == "code/present":
        return 1.0 if hits else math.nan
    if not vals:
        return math.nan
    if agg == "value/count":
        return float(len(vals))
    if agg == "value/sum":
        return math.fsum(vals)
    if agg == "value/sum_sqd":
        return math.fsum(v * v for v in vals)
    if agg == "value/min":
        return min(vals)
    if agg == "value/max":
        return max(vals)
    if agg == "value/mean":
        return math.fsum(vals) / len(vals)
    raise AssertionError(agg)


def dense_tabularize(events: list[Event], columns) -> tuple[list[tuple[int, int]], np.ndarray]:
    # static/first means "first in storage order", so visit events in that order
    ordered = EventShard.from_events(events).sorted().to_events()
    rows = dense_rows(ordered)
    out = np.full((len(rows), len(columns)), np.nan)
    for i, (s, t) in enumerate(rows):
        for j, col in enumerate(columns):
            out[i, j] = dense_value(ordered, s, t, col)
    return rows, out


def brute_rolling_starts(times, window_us: int | None) -> list[int]:
    out = []
    for t in times:
        if window_us is None:
            out.append(0)
        else:
            out.append(next(k for k, u in enumerate(times) if u > t - window_us))
    return out


def auroc_pairs(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), by counting every pair exactly."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    twice = 0  # two per win, one per tie
    for p in pos:
        for n in neg:
            twice += 2 if p > n else p == n
    return float(Fraction(twice, 2 * len(pos) * len(neg)))


def logloss_exact(scores, labels) -> float:
    total = Fraction(0)
    for s, y in zip(scores, labels):
        p = 1.0 / (1.0 + math.exp(-s))
        p = min(max(p, 1e-12), 1 - 1e-12)
        total += Fraction(-math.log(p) if y == 1 else -math.log1p(-p))
    return float(total / len(scores))


def pearson_dense(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Column-wise Pearson r with missing treated as 0; constant columns give 0."""
    X = np.nan_to_num(np.asarray(X, np.float64), nan=0.0)
    y = np.asarray(y, np.float64)
    out = np.zeros(X.shape[1])
    yc = y - y.mean()
    for j in range(X.shape[1]):
        xc = X[:, j] - X[:, j].mean()
        den = math.sqrt(float(xc @ xc) * float(yc @ yc))
        out[j] = 0.0 if den == 0 or np.ptp(X[:, j]) == 0 else float(xc @ yc) / den
    return out


def planted_label(events: list[Event], subject: int, t: int, code: str, window_us: int, k: int) -> int:
    n = sum(1 for e in events if e.subject_id == subject and e.code == code and e.time is not None and t - window_us < e.time <= t)
    return int(n >= k)


EXACT_AGGS = {"static/present", "static/first", "code/count", "code/present", "value/count", "value/min", "value/max"}


def compare_to_dense(events: list[Event], schema, matrix) -> list[str]:
    """Mismatches between a tabularized matrix and the dense recomputation.

    Counting, presence, min, max and first must match exactly (after the f32
    cast of stored values); sums, sums of squares and means to 1e-6 relative.
    """
    rows, want = dense_tabularize(events, schema.columns)
    got_rows = list(zip(matrix.row_subject.tolist(), matrix.row_time.tolist()))
    if got_rows != rows:
        return [f"row index differs: {got_rows} != {rows}"]
    got = matrix.to_dense()
    want32 = want.astype(np.float32).astype(np.float64)
    bad = []
    for j, col in enumerate(schema.columns):
        g, w = got[:, j], want32[:, j]
        if not np.array_equal(np.isnan(g), np.isnan(w)):
            bad.append(f"{col.name}: entry pattern {np.isnan(g)} vs {np.isnan(w)}")
            continue
        m = ~np.isnan(w)
        if col.agg in EXACT_AGGS:
            ok = np.array_equal(g[m], w[m])
        else:
            ok = np.allclose(g[m], want[m, j], rtol=1e-6, atol=0.0)
        if not ok:
            bad.append(f"{col.name}: {g[m]} vs {want[m, j]}")
    return bad


def latest_prior_row(row_keys, subject: int, t: int, strict: bool = True) -> int:
    """Index of the latest (subject, time) row before t, or -1."""
    best = -1
    for i, (s, rt) in enumerate(row_keys):
        if s == subject and (rt < t if strict else rt <= t):
            best = i
    return best


def sparse_from_dense(D, schema_hash: str = "", subjects=None):
    """CSR matrix storing every non-NaN cell of ``D``."""
    from sparsetab.sparse import SparseShardMatrix

    D = np.asarray(D, np.float64)
    n, k = D.shape
    obs = ~np.isnan(D)
    indptr = np.r_[0, np.cumsum(obs.sum(axis=1))]
    rows, cols = np.nonzero(obs)
    subj = np.arange(n) if subjects is None else np.asarray(subjects)
    return SparseShardMatrix(n, k, indptr, cols, D[rows, cols], subj, np.zeros(n, np.int64), schema_hash)


def random_sparse_dense(rng, n, k, density=0.3):
    D = np.round(rng.normal(size=(n, k)) * 4, 2).astype(np.float32).astype(np.float64)
    D[rng.random((n, k)) >= density] = np.nan
    return D
