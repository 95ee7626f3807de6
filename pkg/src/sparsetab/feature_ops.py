"""Code and column selection, imputation, and standardization."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .hashing import config_hash
from .io import atomic_write_json, read_json
from .sparse import SparseShardMatrix

log = logging.getLogger(__name__)

CODE_CRITERIA = ("allowed_codes", "min_code_count", "max_included_codes")
COLUMN_CRITERIA = ("max_by_correlation", "min_correlation")


# ---------------------------------------------------------------- code-level selection


def select_codes(metadata, criterion: str, value) -> set[str]:
    """Apply one pre-featurization criterion to the codes in ``metadata``."""
    counts = metadata.counts()
    if criterion == "allowed_codes":
        allowed = set(value)
        missing = sorted(allowed - counts.keys())
        if missing:
            log.warning("allowed codes not present in metadata, ignored: %s", missing)
        return allowed & counts.keys()
    if criterion == "min_code_count":
        if int(value) <= 0:
            raise ConfigError("min_code_count must be positive")
        return {c for c, n in counts.items() if n >= int(value)}
    if criterion == "max_included_codes":
        if int(value) <= 0:
            raise ConfigError("max_included_codes must be positive")
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {c for c, _ in ranked[: int(value)]}
    raise ConfigError(f"unknown code criterion {criterion!r}; choose from {', '.join(CODE_CRITERIA)}")


def filter_codes(metadata, allowed_codes=None, min_code_count=None, max_included_codes=None) -> set[str]:
    """Intersect every criterion that is set; ``max_included_codes`` ranks what survives the others."""
    keep = set(metadata.codes)
    if allowed_codes is not None:
        keep &= select_codes(metadata, "allowed_codes", allowed_codes)
    if min_code_count is not None:
        keep &= select_codes(metadata, "min_code_count", min_code_count)
    if max_included_codes is not None:
        counts = metadata.counts()
        ranked = sorted(keep, key=lambda c: (-counts[c], c))
        if int(max_included_codes) <= 0:
            raise ConfigError("max_included_codes must be positive")
        keep = set(ranked[: int(max_included_codes)])
    return keep


# ---------------------------------------------------------------- correlations


@dataclass
class CorrelationStats:
    """Mergeable centered statistics for Pearson r with missing entries read as 0.

    Per column: observed count, mean, centered second moment, co-moment with
    the label, observed min/max (to detect exactly constant columns).
    """

    n: int
    y_mean: float
    y_m2: float
    x_mean: np.ndarray
    x_m2: np.ndarray
    xy_c: np.ndarray
    n_obs: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray

    @classmethod
    def from_shard(cls, X: SparseShardMatrix, y: np.ndarray) -> CorrelationStats:
        y = np.asarray(y, dtype=np.float64)
        n, k = X.n_rows, X.n_cols
        col = X.indices.astype(np.int64)
        x = X.data.astype(np.float64)
        row = np.repeat(np.arange(n), X.row_lengths())
        n_obs = np.bincount(col, minlength=k)
        if n == 0:
            z = np.zeros(k)
            return cls(0, 0.0, 0.0, z, z.copy(), z.copy(), n_obs, np.full(k, np.inf), np.full(k, -np.inf))
        y_mean = float(y.mean())
        x_mean = np.bincount(col, weights=x, minlength=k) / n
        dev = x - x_mean[col]
        x_m2 = np.bincount(col, weights=dev * dev, minlength=k) + (n - n_obs) * x_mean**2
        # sum over all rows of x * (y - ybar); unobserved rows contribute 0
        xy_c = np.bincount(col, weights=x * (y[row] - y_mean), minlength=k)
        x_min = np.full(k, np.inf)
        x_max = np.full(k, -np.inf)
        np.minimum.at(x_min, col, x)
        np.maximum.at(x_max, col, x)
        return cls(n, y_mean, float(((y - y_mean) ** 2).sum()), x_mean, x_m2, xy_c, n_obs, x_min, x_max)

    def merge(self, other: CorrelationStats) -> CorrelationStats:
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        dy = other.y_mean - self.y_mean
        dx = other.x_mean - self.x_mean
        w = self.n * other.n / n
        return CorrelationStats(
            n,
            self.y_mean + dy * other.n / n,
            self.y_m2 + other.y_m2 + dy * dy * w,
            self.x_mean + dx * other.n / n,
            self.x_m2 + other.x_m2 + dx * dx * w,
            self.xy_c + other.xy_c + dx * dy * w,
            self.n_obs + other.n_obs,
            np.minimum(self.x_min, other.x_min),
            np.maximum(self.x_max, other.x_max),
        )

    def constant_columns(self) -> np.ndarray:
        never = self.n_obs == 0
        same = self.x_min == self.x_max
        return never | (same & ((self.n_obs == self.n) | (self.x_min == 0.0)))

    def pearson(self) -> np.ndarray:
        if self.n < 2:
            raise DataError("correlations need at least 2 task rows")
        if self.y_m2 <= 0.0:
            raise DataError("all task labels are identical; correlations are undefined")
        const = self.constant_columns()
        denom = np.sqrt(np.where(const, 1.0, self.x_m2) * self.y_m2)
        r = np.where(const | (denom == 0.0), 0.0, self.xy_c / np.where(denom == 0.0, 1.0, denom))
        return np.clip(r, -1.0, 1.0)


def column_correlations(task_shards: Iterable[tuple[SparseShardMatrix, np.ndarray]]) -> np.ndarray:
    """Pearson r of every column against the label, one pass over the shards."""
    stats = None
    for X, y in task_shards:
        s = CorrelationStats.from_shard(X, y)
        stats = s if stats is None else stats.merge(s)
    if stats is None:
        raise DataError("correlations need at least 2 task rows")
    return stats.pearson()


# ---------------------------------------------------------------- column masks


@dataclass
class ColumnMask:
    mask: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.mask)

    @property
    def n_selected(self) -> int:
        return int(self.mask.sum())

    def to_dict(self) -> dict:
        return {"mask": self.mask.astype(int).tolist(), "provenance": self.provenance}

    def save(self, path: str | Path) -> None:
        atomic_write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | Path) -> ColumnMask:
        d = read_json(path)
        return cls(np.asarray(d["mask"], dtype=bool), d.get("provenance", {}))


def top_r_indices(r: np.ndarray, R: int) -> np.ndarray:
    """Indices of the R largest |r|, ties to the lower column index."""
    r = np.asarray(r, dtype=np.float64)
    order = np.lexsort((np.arange(len(r)), -np.abs(r)))
    return np.sort(order[:R])


def select_columns(r: Sequence[float] | np.ndarray, criterion: str, value, *, schema_hash: str = "") -> ColumnMask:
    r = np.asarray(r, dtype=np.float64)
    params = {"criterion": criterion, "value": value, "schema_hash": schema_hash}
    mask = np.zeros(len(r), bool)
    if criterion == "max_by_correlation":
        R = int(value)
        if R <= 0:
            raise ConfigError("max_by_correlation must be positive")
        if R > len(r):
            log.warning("max_by_correlation=%d exceeds %d columns; keeping all", R, len(r))
        mask[top_r_indices(r, R)] = True
    elif criterion == "min_correlation":
        C = float(value)
        if C < 0:
            raise ConfigError("min_correlation must be non-negative")
        mask = np.abs(r) >= C
    else:
        raise ConfigError(f"unknown column criterion {criterion!r}; choose from {', '.join(COLUMN_CRITERIA)}")
    params["config_hash"] = config_hash(params)
    return ColumnMask(mask, params)


# ---------------------------------------------------------------- imputation


def _observed_by_column(X: SparseShardMatrix) -> tuple[np.ndarray, np.ndarray]:
    col = X.indices.astype(np.int64)
    val = X.data.astype(np.float64)
    order = np.lexsort((val, col))
    return col[order], val[order]


def fit_imputer(X: SparseShardMatrix, strategy: str) -> np.ndarray:
    """Per-column fill value from OBSERVED entries of the training matrix."""
    k = X.n_cols
    col, val = _observed_by_column(X)
    n_obs = np.bincount(col, minlength=k)
    fill = np.zeros(k)
    if strategy == "mean":
        sums = np.bincount(col, weights=val, minlength=k)
        np.divide(sums, n_obs, out=fill, where=n_obs > 0)
    elif strategy == "median":
        start = np.r_[0, np.cumsum(n_obs)[:-1]]
        has = n_obs > 0
        lo = start + (n_obs - 1) // 2
        hi = start + n_obs // 2
        fill[has] = (val[lo[has]] + val[hi[has]]) / 2.0
    elif strategy == "mode":
        if len(col):
            pair_new = np.r_[True, (col[1:] != col[:-1]) | (val[1:] != val[:-1])]
            first = np.flatnonzero(pair_new)
            pcol, pval = col[first], val[first]
            pcnt = np.diff(np.r_[first, len(col)])
            # within a column, pick the highest count, then the smallest value
            order = np.lexsort((pval, -pcnt, pcol))
            pcol, pval = pcol[order], pval[order]
            lead = np.r_[True, pcol[1:] != pcol[:-1]]
            fill[pcol[lead]] = pval[lead]
    else:
        raise ConfigError(f"unknown imputation strategy {strategy!r}; use mean, median or mode")
    empty = np.flatnonzero(n_obs == 0)
    if len(empty):
        log.warning("%d columns have no observed entries; imputing 0", len(empty))
    return fill


def impute(X: SparseShardMatrix, strategy: str | None = None, fill: np.ndarray | None = None) -> np.ndarray:
    """Dense float64 matrix with missing entries replaced; observed entries kept exactly."""
    if fill is None:
        if strategy is None:
            raise ConfigError("impute needs a strategy or precomputed fill values")
        fill = fit_imputer(X, strategy)
    log.info("densifying %d x %d matrix for imputation", X.n_rows, X.n_cols)
    out = np.broadcast_to(np.asarray(fill, dtype=np.float64), (X.n_rows, X.n_cols)).copy()
    row = np.repeat(np.arange(X.n_rows), X.row_lengths())
    out[row, X.indices.astype(np.int64)] = X.data
    return out


# ---------------------------------------------------------------- standardization


def fit_standardizer(dense: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and population standard deviations."""
    dense = np.asarray(dense, dtype=np.float64)
    return dense.mean(axis=0), dense.std(axis=0)


def standardize(dense: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    dense = np.asarray(dense, dtype=np.float64)
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (dense - mean) / safe, 0.0)
