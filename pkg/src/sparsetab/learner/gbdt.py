"""Histogram gradient-boosted trees for binary labels.

Trees grow level by level. Each level costs one sequential pass over the
training shards: rows are first routed through the previous level's splits,
then histograms are accumulated for the smaller child of every split (the
sibling follows by subtraction from the parent).

Gradients and hessians are quantized to fixed point (``2**30`` units) before
accumulation, so histogram sums are exact integers. That makes the sibling
subtraction exact and the result independent of how rows are spread over
shards, which is what lets in-memory and external-memory training agree bit
for bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DataError
from ..io import atomic_write_bytes
from ..sparse import SparseShardMatrix
from . import kernels
from .binning import BinningTable, bin_entries, fit_bins
from .data import TaskData
from .metrics import logistic_grad_hess, logloss

log = logging.getLogger(__name__)

SCALE = float(1 << 30)
INV_SCALE = 1.0 / SCALE
MEMORY_MODES = ("in_memory", "external")


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 100
    learning_rate: float = 0.1
    max_depth: int = 6
    max_bins: int = 32
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_hessian: float = 1.0
    colsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 0:
            raise ConfigError("n_trees must be >= 0")
        if not 0 < self.learning_rate <= 1:
            raise ConfigError("learning_rate must lie in (0, 1]")
        if not 1 <= self.max_depth <= 16:
            raise ConfigError("max_depth must lie in [1, 16]")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_hessian < 0:
            raise ConfigError("reg_lambda, gamma and min_child_hessian must be >= 0")
        if not 0 < self.colsample <= 1:
            raise ConfigError("colsample must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> GbdtParams:
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown gbdt parameters: {sorted(unknown)}")
        types = {"n_trees": int, "max_depth": int, "max_bins": int, "seed": int}
        return cls(**{k: types.get(k, float)(v) for k, v in d.items()})


@dataclass
class Tree:
    """Flat node arrays; a leaf has ``feature == -1``. Node 0 is the root."""

    feature: np.ndarray
    bin: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def __len__(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        d = np.zeros(len(self), np.int64)
        for i in range(len(self)):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max()) if len(d) else 0

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "bin": self.bin.tolist(),
            "threshold": [None if not np.isfinite(t) else float(t) for t in self.threshold],
            "default_left": [bool(x) for x in self.default_left],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Tree:
        return cls(
            np.asarray(d["feature"], np.int64),
            np.asarray(d["bin"], np.int64),
            np.asarray([np.inf if t is None else t for t in d["threshold"]], np.float64),
            np.asarray(d["default_left"], bool),
            np.asarray(d["left"], np.int64),
            np.asarray(d["right"], np.int64),
            np.asarray(d["value"], np.float64),
        )


@dataclass
class GbdtModel:
    params: GbdtParams
    base_score: float
    bins: BinningTable
    trees: list[Tree]
    feature_mask: np.ndarray | None = None
    schema_hash: str = ""
    train_logloss: list[float] = field(default_factory=list, compare=False)

    kind = "gbdt"

    @property
    def n_features(self) -> int:
        return self.bins.n_cols

    def _flat(self):
        if not self.trees:
            z = np.zeros(1, np.int64)
            return np.zeros(1, np.int64), -z, np.zeros(1), np.zeros(1, bool), z, z, np.zeros(1)
        sizes = [len(t) for t in self.trees]
        ptr = np.r_[0, np.cumsum(sizes)].astype(np.int64)
        cat = lambda name, dt: np.ascontiguousarray(np.concatenate([getattr(t, name) for t in self.trees]), dt)
        return (
            ptr,
            cat("feature", np.int64),
            cat("threshold", np.float64),
            cat("default_left", np.bool_),
            cat("left", np.int64),
            cat("right", np.int64),
            cat("value", np.float64),
        )

    def _features(self, X: SparseShardMatrix) -> SparseShardMatrix:
        if self.feature_mask is not None and X.n_cols == len(self.feature_mask) != self.n_features:
            X = X.select_columns(self.feature_mask)
        if X.n_cols != self.n_features:
            raise DataError(f"model expects {self.n_features} columns, got {X.n_cols}")
        return X

    def predict_scores(self, X: SparseShardMatrix) -> np.ndarray:
        X = self._features(X)
        ptr, feature, threshold, default_left, left, right, value = self._flat()
        if not self.trees:
            return np.full(X.n_rows, self.base_score)
        return kernels.predict_scores(
            X.indptr.astype(np.int64),
            X.indices.astype(np.int64),
            X.data.astype(np.float64),
            ptr,
            feature,
            threshold,
            default_left,
            left,
            right,
            value,
            self.base_score,
            self.params.learning_rate,
        )

    def predict_proba(self, X: SparseShardMatrix) -> np.ndarray:
        from .metrics import sigmoid

        return sigmoid(self.predict_scores(X))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "format": 1,
            "params": asdict(self.params),
            "seed": self.params.seed,
            "base_score": float(self.base_score),
            "bin_edges": self.bins.to_list(),
            "trees": [t.to_dict() for t in self.trees],
            "feature_mask": None if self.feature_mask is None else self.feature_mask.astype(int).tolist(),
            "schema_hash": self.schema_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)

    def save(self, path: str | Path) -> None:
        atomic_write_bytes(path, (self.to_json() + "\n").encode())

    @classmethod
    def from_dict(cls, d: dict) -> GbdtModel:
        mask = d.get("feature_mask")
        return cls(
            GbdtParams.from_dict(d["params"]),
            float(d["base_score"]),
            BinningTable.from_list(d["bin_edges"]),
            [Tree.from_dict(t) for t in d["trees"]],
            None if mask is None else np.asarray(mask, bool),
            d.get("schema_hash", ""),
        )


# ---------------------------------------------------------------- training


class _Binned:
    """Binned CSR views of the training shards, cached or rebuilt per pass."""

    def __init__(self, data: TaskData, bins: BinningTable, in_memory: bool):
        self.data = data
        self.bins = bins
        self.in_memory = in_memory
        self.cache: list | None = None
        self.passes = 0

    def _make(self, X: SparseShardMatrix):
        return X.indptr.astype(np.int64), X.indices.astype(np.int64), bin_entries(X, self.bins)

    def __iter__(self):
        self.passes += 1
        if self.in_memory:
            if self.cache is None:
                self.cache = [self._make(X) for X, _ in self.data]
            yield from self.cache
        else:
            for X, _ in self.data:
                yield self._make(X)


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.rint(x * SCALE).astype(np.int64)


def _sample_columns(n_cols: int, colsample: float, seed: int, tree: int) -> np.ndarray:
    if colsample >= 1.0 or n_cols == 0:
        return np.arange(n_cols, dtype=np.int64)
    k = max(1, int(np.floor(colsample * n_cols + 0.5)))
    rng = np.random.default_rng([seed, tree])
    return np.sort(rng.choice(n_cols, size=k, replace=False)).astype(np.int64)


def _grow_tree(binned: _Binned, gq, hq, cols, bins: BinningTable, p: GbdtParams):
    """Grow one tree; returns the Tree and the final leaf of every row per shard."""
    col_offset = bins.col_offset
    n_finite = bins.n_finite
    total_bins = bins.total_bins

    G = [int(sum(int(g.sum()) for g in gq))]
    H = [int(sum(int(h.sum()) for h in hq))]
    C = [int(sum(len(g) for g in gq))]
    feature, split_bin, dleft, left, right = [-1], [-1], [True], [-1], [-1]
    parent_of = [-1]
    row_node = [np.zeros(len(g), np.int64) for g in gq]

    level = [0]
    hists: dict[int, np.ndarray] = {}
    pending = False
    for depth in range(p.max_depth + 1):
        can_split = {nd for nd in level if depth < p.max_depth and C[nd] >= 2}
        compute: list[int] = []
        derive: list[tuple[int, int, int]] = []  # (node, parent, sibling)
        if depth == 0:
            if can_split:
                compute = [0]
        else:
            for i in range(0, len(level), 2):
                a, b = level[i], level[i + 1]
                if a not in can_split and b not in can_split:
                    continue
                small, large = (a, b) if C[a] <= C[b] else (b, a)
                compute.append(small)
                if large in can_split:
                    derive.append((large, parent_of[large], small))

        if compute or pending:
            n_nodes = len(feature)
            node_hist = np.full(n_nodes, -1, np.int64)
            node_hist[compute] = np.arange(len(compute))
            out = np.zeros((len(compute), total_bins, 3), np.int64)
            arr = lambda xs, dt: np.asarray(xs, dtype=dt)
            sc, sb, sd, sl, sr = arr(feature, np.int64), arr(split_bin, np.int64), arr(dleft, np.bool_), arr(left, np.int64), arr(right, np.int64)
            for k, (indptr, indices, b) in enumerate(binned):
                if pending:
                    kernels.route_rows(indptr, indices, b, row_node[k], sc, sb, sd, sl, sr)
                if compute:
                    kernels.accumulate_histograms(indptr, indices, b, row_node[k], node_hist, col_offset, gq[k], hq[k], out)
            pending = False
            if compute:
                totals = np.array([[G[nd], H[nd], C[nd]] for nd in compute], np.int64)
                kernels.fill_missing(out, totals, col_offset)
            new_hists = {nd: out[i] for i, nd in enumerate(compute)}
            for nd, par, sib in derive:
                new_hists[nd] = hists[par] - new_hists[sib]
            hists = new_hists

        next_level = []
        for nd in level:
            if nd not in can_split:
                continue
            gain, col, b, dl, gl, hl, cl = kernels.best_split(
                hists[nd], G[nd], H[nd], C[nd], cols, col_offset, n_finite,
                p.reg_lambda, p.gamma, p.min_child_hessian, INV_SCALE,
            )
            if col < 0:
                continue
            li, ri = len(feature), len(feature) + 1
            feature[nd], split_bin[nd], dleft[nd], left[nd], right[nd] = col, b, dl, li, ri
            for g_, h_, c_ in ((gl, hl, cl), (G[nd] - gl, H[nd] - hl, C[nd] - cl)):
                G.append(g_), H.append(h_), C.append(c_)
                feature.append(-1), split_bin.append(-1), dleft.append(True), left.append(-1), right.append(-1)
                parent_of.append(nd)
            next_level += [li, ri]
        # keep only histograms of nodes that were split (parents of the next level)
        hists = {nd: h for nd, h in hists.items() if feature[nd] >= 0}
        if not next_level:
            break
        pending = True
        level = next_level

    feature_a = np.asarray(feature, np.int64)
    bin_a = np.asarray(split_bin, np.int64)
    threshold = np.full(len(feature_a), np.inf)
    for i in np.flatnonzero(feature_a >= 0):
        e = bins.edges[feature_a[i]]
        threshold[i] = e[bin_a[i]] if bin_a[i] < len(e) else np.inf
    Gf = np.asarray(G, np.float64) * INV_SCALE
    Hf = np.asarray(H, np.float64) * INV_SCALE
    denom = Hf + p.reg_lambda
    value = np.where(denom > 0, -Gf / np.where(denom > 0, denom, 1.0), 0.0)
    value[feature_a >= 0] = 0.0
    tree = Tree(feature_a, bin_a, threshold, np.asarray(dleft, bool), np.asarray(left, np.int64), np.asarray(right, np.int64), value)
    return tree, row_node


def fit_gbdt(
    data: TaskData,
    params: GbdtParams | None = None,
    memory_mode: str = "in_memory",
) -> GbdtModel:
    """Boost ``params.n_trees`` trees on ``data``.

    ``memory_mode="external"`` re-reads and re-bins every shard from its
    loader on each level pass; ``"in_memory"`` bins once and keeps the result.
    """
    p = params or GbdtParams()
    if memory_mode not in MEMORY_MODES:
        raise ConfigError(f"memory_mode must be one of {MEMORY_MODES}")
    ys = [y.astype(np.float64) for _, y in data]
    n = sum(len(y) for y in ys)
    pos = sum(float(y.sum()) for y in ys)
    if n == 0 or pos == 0 or pos == n:
        raise DataError("training data must contain both classes")
    prevalence = pos / n
    base = float(np.log(prevalence / (1.0 - prevalence)))

    bins = fit_bins(data, p.max_bins, p.seed)
    binned = _Binned(data, bins, memory_mode == "in_memory")
    scores = [np.full(len(y), base) for y in ys]
    trees: list[Tree] = []
    history = []
    for t in range(p.n_trees):
        gh = [logistic_grad_hess(s, y) for s, y in zip(scores, ys)]
        gq = [_quantize(g) for g, _ in gh]
        hq = [_quantize(h) for _, h in gh]
        cols = _sample_columns(bins.n_cols, p.colsample, p.seed, t)
        tree, leaves = _grow_tree(binned, gq, hq, cols, bins, p)
        trees.append(tree)
        for s, leaf in zip(scores, leaves):
            s += p.learning_rate * tree.value[leaf]
        loss = logloss(np.concatenate(scores), np.concatenate(ys))
        history.append(loss)
        log.debug("tree %d: %d nodes, train logloss %.6f", t, len(tree), loss)
    model = GbdtModel(p, base, bins, trees, data.col_mask, data.schema_hash, history)
    model.passes = binned.passes
    return model


def load_model(path: str | Path, schema_hash: str | None = None):
    """Load a GBDT or linear model JSON; a mismatched ``schema_hash`` is fatal."""
    from .linear import LinearModel

    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    kind = d.get("kind")
    if kind == "gbdt":
        model = GbdtModel.from_dict(d)
    elif kind == "sgd":
        model = LinearModel.from_dict(d)
    else:
        raise DataError(f"{path}: unknown model kind {kind!r}")
    if schema_hash is not None and model.schema_hash != schema_hash:
        raise DataError(f"{path}: model was trained for schema {model.schema_hash[:12]}, data has {schema_hash[:12]}")
    return model
