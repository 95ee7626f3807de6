"""Canonical config hashing and the seeded subject hash."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def config_hash(obj: Any) -> str:
    """SHA-256 hex digest of ``obj`` serialized with sorted keys."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def file_sha256(path: str | Path, chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            h.update(block)
    return h.hexdigest()


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def subject_hash(subject_ids: np.ndarray, seed: int) -> np.ndarray:
    """Seeded 64-bit hash of subject ids; stable across platforms and runs."""
    sid = np.asarray(subject_ids, dtype=np.int64).view(np.uint64)
    salt = splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    return splitmix64(sid ^ salt)


def subject_unit_interval(subject_ids: np.ndarray, seed: int) -> np.ndarray:
    """Map subjects to [0, 1) using the top 53 bits of the seeded hash."""
    h = subject_hash(subject_ids, seed) >> np.uint64(11)
    return h.astype(np.float64) / float(1 << 53)
