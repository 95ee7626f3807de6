"""CSR shard matrices with a (subject_id, time) row index.

On-disk layout of one matrix directory (little-endian)::

    meta.json     {n_rows, n_cols, nnz, value_dtype, index_dtype, ptr_dtype, schema_hash}
    indptr.bin    u64 x (n_rows + 1)
    indices.bin   u32 x nnz
    data.bin      f32 x nnz
    rows.parquet  subject_id, time

An absent entry means "nothing observed"; stored zeros are real values.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.parquet as pq

from .errors import DataError, InvariantError
from .io import atomic_dir, atomic_write_bytes, atomic_write_json, read_json

PTR = np.dtype("<u8")
IDX = np.dtype("<u4")
VAL = np.dtype("<f4")


@dataclass
class SparseShardMatrix:
    n_rows: int
    n_cols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    row_subject: np.ndarray
    row_time: np.ndarray
    schema_hash: str = ""

    def __post_init__(self):
        self.indptr = np.ascontiguousarray(self.indptr, dtype=PTR)
        self.indices = np.ascontiguousarray(self.indices, dtype=IDX)
        self.data = np.ascontiguousarray(self.data, dtype=VAL)
        self.row_subject = np.ascontiguousarray(self.row_subject, dtype=np.int64)
        self.row_time = np.ascontiguousarray(self.row_time, dtype=np.int64)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1]) if len(self.indptr) else 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    @classmethod
    def empty(cls, n_cols: int, schema_hash: str = "") -> SparseShardMatrix:
        z = np.zeros(0, np.int64)
        return cls(0, n_cols, np.zeros(1, PTR), np.zeros(0, IDX), np.zeros(0, VAL), z, z, schema_hash)

    def validate(self) -> None:
        if len(self.indptr) != self.n_rows + 1 or len(self.row_subject) != self.n_rows:
            raise InvariantError("row pointer / row index length mismatch")
        if self.indptr[0] != 0 or np.any(np.diff(self.indptr.astype(np.int64)) < 0):
            raise InvariantError("row pointers must start at 0 and be non-decreasing")
        if self.nnz != len(self.indices) or self.nnz != len(self.data):
            raise InvariantError("last row pointer must equal nnz")
        if self.nnz:
            if int(self.indices.max()) >= self.n_cols:
                raise InvariantError("column index out of range")
            ind = self.indices.astype(np.int64)
            step = np.diff(ind)
            row_start = np.zeros(self.nnz, bool)
            starts = self.indptr[:-1].astype(np.int64)
            row_start[starts[starts < self.nnz]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise InvariantError("column indices must strictly increase within a row")

    # ------------------------------------------------------------ transforms

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.indptr.astype(np.int64))

    def take_rows(self, rows: np.ndarray) -> SparseShardMatrix:
        """Rows in the given order; repeats allowed."""
        rows = np.asarray(rows, dtype=np.int64)
        ptr = self.indptr.astype(np.int64)
        lengths = ptr[rows + 1] - ptr[rows]
        new_ptr = np.zeros(len(rows) + 1, np.int64)
        np.cumsum(lengths, out=new_ptr[1:])
        src = np.repeat(ptr[rows] - new_ptr[:-1], lengths) + np.arange(new_ptr[-1])
        return SparseShardMatrix(
            len(rows),
            self.n_cols,
            new_ptr,
            self.indices[src],
            self.data[src],
            self.row_subject[rows],
            self.row_time[rows],
            self.schema_hash,
        )

    def select_columns(self, keep: np.ndarray) -> SparseShardMatrix:
        """Keep columns where ``keep`` is True, renumbering them densely."""
        keep = np.asarray(keep, dtype=bool)
        new_index = np.cumsum(keep) - 1
        entry_keep = keep[self.indices]
        row_of = np.repeat(np.arange(self.n_rows), self.row_lengths())
        counts = np.bincount(row_of[entry_keep], minlength=self.n_rows)
        ptr = np.zeros(self.n_rows + 1, np.int64)
        np.cumsum(counts, out=ptr[1:])
        return SparseShardMatrix(
            self.n_rows,
            int(keep.sum()),
            ptr,
            new_index[self.indices[entry_keep]],
            self.data[entry_keep],
            self.row_subject,
            self.row_time,
            self.schema_hash,
        )

    def to_dense(self, fill: float = np.nan, dtype=np.float64) -> np.ndarray:
        out = np.full((self.n_rows, self.n_cols), fill, dtype=dtype)
        row_of = np.repeat(np.arange(self.n_rows), self.row_lengths())
        out[row_of, self.indices.astype(np.int64)] = self.data
        return out

    def content_bytes(self) -> bytes:
        """Canonical byte image of the matrix payload, for equality checks."""
        head = np.array([self.n_rows, self.n_cols], dtype="<i8").tobytes()
        return b"".join(
            [
                head,
                self.indptr.tobytes(),
                self.indices.tobytes(),
                self.data.tobytes(),
                self.row_subject.astype("<i8").tobytes(),
                self.row_time.astype("<i8").tobytes(),
            ]
        )

    # ------------------------------------------------------------ persistence

    def meta(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "nnz": self.nnz,
            "value_dtype": "f32",
            "index_dtype": "u32",
            "ptr_dtype": "u64",
            "schema_hash": self.schema_hash,
        }

    def write_into(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        atomic_write_json(directory / "meta.json", self.meta())
        atomic_write_bytes(directory / "indptr.bin", self.indptr.tobytes())
        atomic_write_bytes(directory / "indices.bin", self.indices.tobytes())
        atomic_write_bytes(directory / "data.bin", self.data.tobytes())
        rows = pa.table(
            {
                "subject_id": pa.array(self.row_subject, pa.int64()),
                "time": pa.array(self.row_time, pa.int64()).cast(pa.timestamp("us", tz="UTC")),
            }
        )
        sink = pa.BufferOutputStream()
        pq.write_table(rows, sink, compression="zstd")
        atomic_write_bytes(directory / "rows.parquet", sink.getvalue().to_pybytes())

    def save(self, directory: str | Path) -> None:
        self.validate()
        with atomic_dir(directory) as tmp:
            self.write_into(tmp)

    @classmethod
    def load(cls, directory: str | Path, *, mmap: bool = False) -> SparseShardMatrix:
        directory = Path(directory)
        meta = read_json(directory / "meta.json")
        if (meta.get("value_dtype"), meta.get("index_dtype"), meta.get("ptr_dtype")) != ("f32", "u32", "u64"):
            raise DataError(f"{directory}: unsupported dtypes in meta.json")

        def arr(name, dtype, count):
            path = directory / name
            if not path.exists():
                raise DataError(f"missing matrix file: {path}")
            if mmap and count:
                return np.memmap(path, dtype=dtype, mode="r", shape=(count,))
            return np.fromfile(path, dtype=dtype, count=count)

        n_rows, nnz = int(meta["n_rows"]), int(meta["nnz"])
        rows = pq.read_table(directory / "rows.parquet")
        out = cls(
            n_rows,
            int(meta["n_cols"]),
            arr("indptr.bin", PTR, n_rows + 1),
            arr("indices.bin", IDX, nnz),
            arr("data.bin", VAL, nnz),
            rows.column("subject_id").to_numpy().astype(np.int64),
            rows.column("time").cast(pa.int64()).to_numpy().astype(np.int64),
            meta.get("schema_hash", ""),
        )
        if out.nnz != nnz:
            raise DataError(f"{directory}: indptr disagrees with nnz in meta.json")
        return out


def hstack(blocks: Sequence[SparseShardMatrix], schema_hash: str | None = None) -> SparseShardMatrix:
    """Concatenate matrices column-wise; all must share the same row index."""
    if not blocks:
        raise ValueError("nothing to stack")
    first = blocks[0]
    n_rows = first.n_rows
    for b in blocks[1:]:
        if b.n_rows != n_rows or not (
            np.array_equal(b.row_subject, first.row_subject) and np.array_equal(b.row_time, first.row_time)
        ):
            raise InvariantError("hstack blocks must share one row index")
    lengths = [b.row_lengths() for b in blocks]
    total = np.sum(lengths, axis=0) if n_rows else np.zeros(0, np.int64)
    ptr = np.zeros(n_rows + 1, np.int64)
    np.cumsum(total, out=ptr[1:])
    indices = np.empty(ptr[-1], IDX)
    data = np.empty(ptr[-1], VAL)
    before = np.zeros(n_rows, np.int64)
    col_offset = 0
    for b, ln in zip(blocks, lengths):
        row_of = np.repeat(np.arange(n_rows), ln)
        within = np.arange(b.nnz) - b.indptr[:-1].astype(np.int64)[row_of]
        dest = ptr[:-1][row_of] + before[row_of] + within
        indices[dest] = b.indices.astype(np.int64) + col_offset
        data[dest] = b.data
        before += ln
        col_offset += b.n_cols
    return SparseShardMatrix(
        n_rows,
        col_offset,
        ptr,
        indices,
        data,
        first.row_subject,
        first.row_time,
        first.schema_hash if schema_hash is None else schema_hash,
    )


def vstack(mats: Sequence[SparseShardMatrix]) -> SparseShardMatrix:
    """Concatenate matrices row-wise; all must have the same column count."""
    if not mats:
        raise ValueError("nothing to stack")
    n_cols = mats[0].n_cols
    if any(m.n_cols != n_cols for m in mats):
        raise InvariantError("vstack requires equal column counts")
    ptrs = [np.zeros(1, np.int64)]
    offset = 0
    for m in mats:
        ptrs.append(m.indptr[1:].astype(np.int64) + offset)
        offset += m.nnz
    return SparseShardMatrix(
        sum(m.n_rows for m in mats),
        n_cols,
        np.concatenate(ptrs),
        np.concatenate([m.indices for m in mats]),
        np.concatenate([m.data for m in mats]),
        np.concatenate([m.row_subject for m in mats]),
        np.concatenate([m.row_time for m in mats]),
        mats[0].schema_hash,
    )
