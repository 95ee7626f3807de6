"""Per-column quantile bins from a seeded reservoir sample of observed values.

Finite bin ``b`` of a column holds values in ``(edges[b-1], edges[b]]``, so a
column with ``k`` edges has ``k + 1`` finite bins; structurally absent entries
go to a separate MISSING slot that is never part of the edge table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _accel
from ..errors import ConfigError
from ..sparse import SparseShardMatrix

RESERVOIR = 1 << 18


@dataclass
class BinningTable:
    edges: list[np.ndarray]

    def __post_init__(self):
        self.edges = [np.asarray(e, dtype=np.float64) for e in self.edges]
        for e in self.edges:
            if len(e) > 1 and np.any(np.diff(e) <= 0):
                raise ConfigError("bin edges must be strictly increasing")

    @property
    def n_cols(self) -> int:
        return len(self.edges)

    @property
    def n_finite(self) -> np.ndarray:
        return np.array([len(e) + 1 for e in self.edges], np.int64)

    @property
    def col_offset(self) -> np.ndarray:
        """Start of each column in the flattened histogram; slot ``n_finite`` is MISSING."""
        return np.r_[0, np.cumsum(self.n_finite + 1)].astype(np.int64)

    @property
    def total_bins(self) -> int:
        return int(self.col_offset[-1])

    def flat_edges(self) -> tuple[np.ndarray, np.ndarray]:
        ptr = np.r_[0, np.cumsum([len(e) for e in self.edges])].astype(np.int64)
        flat = np.concatenate(self.edges) if self.edges else np.zeros(0)
        return ptr, np.ascontiguousarray(flat, np.float64)

    def to_list(self) -> list[list[float]]:
        return [e.tolist() for e in self.edges]

    @classmethod
    def from_list(cls, edges: list[list[float]]) -> BinningTable:
        return cls([np.asarray(e, dtype=np.float64) for e in edges])


def edges_from_sample(sample: np.ndarray, max_bins: int) -> np.ndarray:
    """At most ``max_bins - 1`` strictly increasing edges below the sample maximum."""
    if len(sample) == 0:
        return np.zeros(0)
    q = np.arange(1, max_bins) / max_bins
    edges = np.unique(np.quantile(sample, q, method="lower"))
    return edges[edges < sample.max()]


class _Reservoir:
    def __init__(self, capacity: int, seed: int, column: int):
        self.capacity = capacity
        self.seed = seed
        self.column = column
        self.parts: list[np.ndarray] = []
        self.sample: np.ndarray | None = None
        self.seen = 0
        self.rng: np.random.Generator | None = None

    def add(self, values: np.ndarray) -> None:
        if self.sample is None and self.seen + len(values) <= self.capacity:
            self.parts.append(values)
            self.seen += len(values)
            return
        if self.sample is None:
            self.sample = np.concatenate(self.parts) if self.parts else np.zeros(0)
            self.parts = []
            self.rng = np.random.default_rng([self.seed, self.column])
            fill = self.capacity - len(self.sample)
            self.sample = np.r_[self.sample, values[:fill]]
            self.seen += min(fill, len(values))
            values = values[fill:]
        if len(values) == 0:
            return
        # Algorithm R: item with global index i replaces slot j ~ U[0, i] when j < capacity
        idx = self.seen + np.arange(len(values))
        j = self.rng.integers(0, idx + 1)
        hit = np.flatnonzero(j < self.capacity)
        if len(hit):
            slots = j[hit][::-1]
            _, last = np.unique(slots, return_index=True)
            self.sample[slots[last]] = values[hit][::-1][last]
        self.seen += len(values)

    def values(self) -> np.ndarray:
        if self.sample is not None:
            return self.sample
        return np.concatenate(self.parts) if self.parts else np.zeros(0)


def fit_bins(shards, max_bins: int = 32, seed: int = 0, capacity: int = RESERVOIR) -> BinningTable:
    """Quantile edges per column over observed entries of the training shards."""
    if not 2 <= max_bins <= 4096:
        raise ConfigError("max_bins must lie in [2, 4096]")
    reservoirs: dict[int, _Reservoir] = {}
    n_cols = None
    for X, _ in shards:
        n_cols = X.n_cols
        if X.nnz == 0:
            continue
        col = X.indices.astype(np.int64)
        order = np.argsort(col, kind="stable")
        col_sorted = col[order]
        vals = X.data[order].astype(np.float64)
        cuts = np.flatnonzero(np.r_[True, col_sorted[1:] != col_sorted[:-1]])
        for a, b in zip(cuts, np.r_[cuts[1:], len(col_sorted)]):
            c = int(col_sorted[a])
            if c not in reservoirs:
                reservoirs[c] = _Reservoir(capacity, seed, c)
            reservoirs[c].add(vals[a:b])
    if n_cols is None:
        raise ConfigError("no training shards to fit bins on")
    edges = [
        edges_from_sample(np.sort(reservoirs[c].values()), max_bins) if c in reservoirs else np.zeros(0)
        for c in range(n_cols)
    ]
    return BinningTable(edges)


@_accel.njit
def _bin_entries_nb(indices, data, edge_ptr, edges):
    out = np.empty(indices.shape[0], np.uint16)
    for k in range(indices.shape[0]):
        c = indices[k]
        lo = edge_ptr[c]
        hi = edge_ptr[c + 1]
        v = data[k]
        # first edge >= v  (searchsorted side='left')
        while lo < hi:
            mid = (lo + hi) >> 1
            if edges[mid] < v:
                lo = mid + 1
            else:
                hi = mid
        out[k] = lo - edge_ptr[c]
    return out


def _bin_entries_np(indices, data, edge_ptr, edges):
    out = np.empty(len(indices), np.uint16)
    order = np.argsort(indices, kind="stable")
    cols = indices[order]
    cuts = np.flatnonzero(np.r_[True, cols[1:] != cols[:-1]]) if len(cols) else np.zeros(0, np.int64)
    for a, b in zip(cuts, np.r_[cuts[1:], len(cols)]):
        c = int(cols[a])
        e = edges[edge_ptr[c] : edge_ptr[c + 1]]
        sel = order[a:b]
        out[sel] = np.searchsorted(e, data[sel], side="left")
    return out


def bin_entries(X: SparseShardMatrix, table: BinningTable) -> np.ndarray:
    """Finite bin of every stored entry of ``X``."""
    ptr, flat = table.flat_edges()
    indices = X.indices.astype(np.int64)
    data = X.data.astype(np.float64)
    if _accel.backend() == "numba":
        return _bin_entries_nb(indices, data, ptr, flat)
    return _bin_entries_np(indices, data, ptr, flat)
