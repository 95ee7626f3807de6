"""Task shards as seen by the learners: a row filter (subject split) and a column mask
applied on top of shard loaders that either hit disk each time or return cached arrays."""

from __future__ import annotations

from collections.abc import Callable, Iterator, Sequence
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..sparse import SparseShardMatrix, vstack

Loader = Callable[[], tuple[SparseShardMatrix, np.ndarray]]


class TaskData:
    def __init__(
        self,
        loaders: Sequence[Loader],
        n_cols: int,
        schema_hash: str = "",
        subjects: np.ndarray | None = None,
        col_mask: np.ndarray | None = None,
    ):
        self.loaders = list(loaders)
        self.n_cols_full = int(n_cols)
        self.schema_hash = schema_hash
        self.subjects = None if subjects is None else np.unique(np.asarray(subjects, np.int64))
        self.col_mask = None if col_mask is None else np.asarray(col_mask, bool)
        if self.col_mask is not None and len(self.col_mask) != self.n_cols_full:
            raise DataError(f"column mask has {len(self.col_mask)} entries for {self.n_cols_full} columns")

    @classmethod
    def from_dirs(cls, dirs: Sequence[str | Path], **kw) -> TaskData:
        from ..task_cache import TaskShard

        def make(d):
            def load():
                t = TaskShard.load(d)
                return t.X, t.y

            return load

        dirs = [Path(d) for d in dirs]
        first, _ = make(dirs[0])() if dirs else (SparseShardMatrix.empty(0), None)
        return cls([make(d) for d in dirs], first.n_cols, first.schema_hash, **kw)

    @classmethod
    def from_memory(cls, shards: Sequence[tuple[SparseShardMatrix, np.ndarray]], **kw) -> TaskData:
        shards = list(shards)
        if not shards:
            raise DataError("no task shards")
        loaders = [(lambda X=X, y=np.asarray(y, bool): (X, y)) for X, y in shards]
        return cls(loaders, shards[0][0].n_cols, shards[0][0].schema_hash, **kw)

    def __len__(self) -> int:
        return len(self.loaders)

    @property
    def n_cols(self) -> int:
        return self.n_cols_full if self.col_mask is None else int(self.col_mask.sum())

    def load(self, i: int) -> tuple[SparseShardMatrix, np.ndarray]:
        X, y = self.loaders[i]()
        if X.n_cols != self.n_cols_full:
            raise DataError(f"task shard {i} has {X.n_cols} columns, expected {self.n_cols_full}")
        if self.schema_hash and X.schema_hash != self.schema_hash:
            raise DataError(f"task shard {i} was cached for a different feature schema")
        if self.subjects is not None:
            keep = np.flatnonzero(np.isin(X.row_subject, self.subjects))
            if len(keep) != X.n_rows:
                X, y = X.take_rows(keep), y[keep]
        if self.col_mask is not None:
            X = X.select_columns(self.col_mask)
        return X, np.asarray(y, bool)

    def __iter__(self) -> Iterator[tuple[SparseShardMatrix, np.ndarray]]:
        for i in range(len(self)):
            yield self.load(i)

    def restrict(self, subjects: np.ndarray | None = None, col_mask: np.ndarray | None = None) -> TaskData:
        """Same loaders, narrower rows and/or columns (masks are over the full schema)."""
        return TaskData(
            self.loaders,
            self.n_cols_full,
            self.schema_hash,
            self.subjects if subjects is None else subjects,
            self.col_mask if col_mask is None else col_mask,
        )

    def cached(self) -> TaskData:
        """Load every shard once (unfiltered) and serve it from memory afterwards."""
        raw = [f() for f in self.loaders]
        return TaskData(
            [(lambda p=p: p) for p in raw], self.n_cols_full, self.schema_hash, self.subjects, self.col_mask
        )

    def labels(self) -> np.ndarray:
        ys = [y for _, y in self]
        return np.concatenate(ys) if ys else np.zeros(0, bool)

    def stacked(self) -> tuple[SparseShardMatrix, np.ndarray]:
        parts = list(self)
        return vstack([X for X, _ in parts]), np.concatenate([y for _, y in parts])

    def row_subjects(self) -> np.ndarray:
        subs = [X.row_subject for X, _ in self]
        return np.concatenate(subs) if subs else np.zeros(0, np.int64)
