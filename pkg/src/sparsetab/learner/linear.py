"""Out-of-core logistic regression by per-row SGD with an L2 proximal step."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..feature_ops import fit_imputer, fit_standardizer, impute, standardize
from ..io import atomic_write_bytes
from ..sparse import SparseShardMatrix
from . import kernels
from .data import TaskData


@dataclass(frozen=True)
class SgdParams:
    epochs: int = 20
    learning_rate: float = 0.05
    decay: float = 0.0  # lr_e = learning_rate / (1 + decay * e)
    l2: float = 1e-4
    impute: str | None = None  # mean | median | mode; None leaves missing as 0
    standardize: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0 or self.decay < 0 or self.l2 < 0:
            raise ConfigError("learning_rate must be > 0; decay and l2 >= 0")
        if self.impute not in (None, "mean", "median", "mode"):
            raise ConfigError(f"unknown imputation {self.impute!r}")

    @classmethod
    def from_dict(cls, d: dict) -> SgdParams:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sgd parameters: {sorted(unknown)}")
        return cls(**d)


def dense_to_csr(dense: np.ndarray, like: SparseShardMatrix) -> SparseShardMatrix:
    n, k = dense.shape
    return SparseShardMatrix(
        n,
        k,
        np.arange(n + 1, dtype=np.int64) * k,
        np.tile(np.arange(k), n),
        dense.ravel(),
        like.row_subject,
        like.row_time,
        like.schema_hash,
    )


@dataclass
class LinearModel:
    params: SgdParams
    weights: np.ndarray
    bias: float
    feature_mask: np.ndarray | None = None
    schema_hash: str = ""
    fill: np.ndarray | None = None
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    kind = "sgd"

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def transform(self, X: SparseShardMatrix) -> SparseShardMatrix:
        if self.feature_mask is not None and X.n_cols == len(self.feature_mask) != self.n_features:
            X = X.select_columns(self.feature_mask)
        if self.fill is None and self.mean is None:
            return X
        dense = impute(X, fill=self.fill) if self.fill is not None else X.to_dense(fill=0.0)
        if self.mean is not None:
            dense = standardize(dense, self.mean, self.std)
        return dense_to_csr(dense, X)

    def predict_scores(self, X: SparseShardMatrix) -> np.ndarray:
        X = self.transform(X)
        row = np.repeat(np.arange(X.n_rows), X.row_lengths())
        contrib = self.weights[X.indices.astype(np.int64)] * X.data.astype(np.float64)
        return self.bias + np.bincount(row, weights=contrib, minlength=X.n_rows)

    def predict_proba(self, X: SparseShardMatrix) -> np.ndarray:
        from .metrics import sigmoid

        return sigmoid(self.predict_scores(X))

    def to_dict(self) -> dict:
        opt = lambda a: None if a is None else [float(x) for x in a]
        return {
            "kind": self.kind,
            "format": 1,
            "params": asdict(self.params),
            "seed": self.params.seed,
            "weights": [float(w) for w in self.weights],
            "bias": float(self.bias),
            "feature_mask": None if self.feature_mask is None else self.feature_mask.astype(int).tolist(),
            "schema_hash": self.schema_hash,
            "impute_fill": opt(self.fill),
            "mean": opt(self.mean),
            "std": opt(self.std),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(path, (self.to_json() + "\n").encode())

    @classmethod
    def from_dict(cls, d: dict) -> LinearModel:
        arr = lambda k: None if d.get(k) is None else np.asarray(d[k], np.float64)
        mask = d.get("feature_mask")
        return cls(
            SgdParams.from_dict(d["params"]),
            np.asarray(d["weights"], np.float64),
            float(d["bias"]),
            None if mask is None else np.asarray(mask, bool),
            d.get("schema_hash", ""),
            arr("impute_fill"),
            arr("mean"),
            arr("std"),
        )


def fit_sgd_logistic(data: TaskData, params: SgdParams | None = None) -> LinearModel:
    """Epochs of sequential shard passes, rows shuffled within each shard."""
    p = params or SgdParams()
    model = LinearModel(p, np.zeros(data.n_cols), 0.0, data.col_mask, data.schema_hash)
    if p.impute is not None or p.standardize:
        # statistics need the whole training split once
        X_all, _ = data.stacked()
        if p.impute is not None:
            model.fill = fit_imputer(X_all, p.impute)
        if p.standardize:
            dense = impute(X_all, fill=model.fill) if model.fill is not None else X_all.to_dense(fill=0.0)
            model.mean, model.std = fit_standardizer(dense)
    v = np.zeros(data.n_cols)
    scale, bias = 1.0, 0.0
    for epoch in range(p.epochs):
        lr = p.learning_rate / (1.0 + p.decay * epoch)
        total, n = 0.0, 0
        for k, (X, y) in enumerate(data):
            X = model.transform(X) if (model.fill is not None or model.mean is not None) else X
            order = np.random.default_rng([p.seed, epoch, k]).permutation(X.n_rows)
            scale, bias, loss = kernels.sgd_epoch(
                X.indptr.astype(np.int64),
                X.indices.astype(np.int64),
                X.data.astype(np.float64),
                y.astype(np.float64),
                order.astype(np.int64),
                v,
                scale,
                bias,
                lr,
                p.l2,
            )
            total += loss
            n += X.n_rows
        if not np.isfinite(total) or not np.all(np.isfinite(v)) or not np.isfinite(bias):
            raise ConfigError(
                f"SGD diverged at epoch {epoch} (lr={lr:g}, loss={total}); lower learning_rate or standardize features"
            )
    model.weights = v * scale
    model.bias = bias
    return model
