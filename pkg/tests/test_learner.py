import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import auroc_pairs, logloss_exact, sparse_from_dense
from sparsetab import _accel
from sparsetab.errors import ConfigError, DataError
from sparsetab.learner import (
    GbdtParams,
    SgdParams,
    TaskData,
    auroc,
    fit_bins,
    fit_gbdt,
    fit_sgd_logistic,
    load_model,
    logistic_grad_hess,
    logloss,
    sigmoid,
)
from sparsetab.learner import kernels
from sparsetab.learner.binning import BinningTable, bin_entries, edges_from_sample
from sparsetab.learner.gbdt import INV_SCALE, SCALE

# ---------------------------------------------------------------- metrics


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auroc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    with pytest.raises(DataError):
        auroc([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 300))
def test_auroc_matches_pair_counting(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 20, n) / 4.0  # plenty of ties
    assert abs(auroc(s, y) - auroc_pairs(s.tolist(), y.tolist())) <= 1e-9


def test_grad_hess_example():
    g, h = logistic_grad_hess(np.array([0.0]), np.array([1.0]))
    assert g[0] == -0.5 and h[0] == 0.25
    g, h = logistic_grad_hess(np.array([50.0]), np.array([1.0]))
    assert abs(g[0]) < 1e-20 and h[0] < 1e-15


@settings(max_examples=100, deadline=None)
@given(st.floats(-8, 8), st.sampled_from([0, 1]))
def test_grad_hess_match_finite_differences(s, y):
    eps = 1e-4
    ell = lambda v: logloss(np.array([v]), np.array([y]))  # noqa: E731
    g, h = logistic_grad_hess(np.array([s]), np.array([y]))
    assert g[0] == pytest.approx((ell(s + eps) - ell(s - eps)) / (2 * eps), abs=1e-4)
    gp, _ = logistic_grad_hess(np.array([s + eps]), np.array([y]))
    gm, _ = logistic_grad_hess(np.array([s - eps]), np.array([y]))
    assert h[0] == pytest.approx((gp[0] - gm[0]) / (2 * eps), abs=1e-4)


def test_logloss_reference():
    assert logloss(np.zeros(4), np.array([0, 1, 0, 1])) == pytest.approx(math.log(2), abs=1e-15)
    assert logloss(np.array([40.0, -40.0]), np.array([1, 0])) < 1e-12
    rng = np.random.default_rng(3)
    s, y = rng.normal(0, 3, 200), rng.integers(0, 2, 200)
    assert abs(logloss(s, y) - logloss_exact(s.tolist(), y.tolist())) <= 1e-12


def test_sigmoid_is_stable():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert out.tolist() == [0.0, 0.5, 1.0]


# ---------------------------------------------------------------- binning


def test_quantile_edges():
    edges = edges_from_sample(np.arange(1, 101, dtype=float), 4)
    assert edges.tolist() == [25.0, 50.0, 75.0]
    assert len(edges_from_sample(np.full(10, 3.0), 8)) == 0


def test_fit_bins_is_deterministic_and_uses_reservoir():
    rng = np.random.default_rng(0)
    D = rng.normal(size=(500, 3))
    D[:, 2] = 4.0
    X = sparse_from_dense(D)
    a = fit_bins([(X, None)], max_bins=8, seed=1, capacity=64)
    b = fit_bins([(X, None)], max_bins=8, seed=1, capacity=64)
    assert a.to_list() == b.to_list()
    assert len(a.edges[2]) == 0
    for c in range(2):
        assert set(a.edges[c].tolist()) <= set(D[:, c].astype(np.float32).astype(float).tolist())
    full = fit_bins([(X, None)], max_bins=8, seed=1)
    assert full.to_list() != a.to_list()


def test_bin_entries_backends_agree(rng):
    D = np.round(rng.normal(size=(200, 5)), 1)
    D[rng.random(D.shape) < 0.3] = np.nan
    X = sparse_from_dense(D)
    table = fit_bins([(X, None)], max_bins=6)
    out = {}
    for name in ("numba", "numpy"):
        with _accel.use_backend(name):
            out[name] = bin_entries(X, table)
    assert np.array_equal(out["numba"], out["numpy"])
    for k, (c, v) in enumerate(zip(X.indices, X.data)):
        assert out["numba"][k] == np.searchsorted(table.edges[c], v, side="left")


# ---------------------------------------------------------------- histograms and splits


def _hist(X, table, rows_mask, g, h):
    bins = bin_entries(X, table)
    row_node = np.where(rows_mask, 0, -1).astype(np.int64)
    out = np.zeros((1, table.total_bins, 3), np.int64)
    gq = np.rint(g * SCALE).astype(np.int64)
    hq = np.rint(h * SCALE).astype(np.int64)
    kernels.accumulate_histograms(
        X.indptr.astype(np.int64), X.indices.astype(np.int64), bins, row_node, np.array([0]), table.col_offset, gq, hq, out
    )
    totals = np.array([[gq[rows_mask].sum(), hq[rows_mask].sum(), rows_mask.sum()]])
    kernels.fill_missing(out, totals, table.col_offset)
    return out[0]


def test_single_row_histogram(backend):
    table = BinningTable([np.array([1.0, 2.0, 3.0]), np.array([0.5])])
    X = sparse_from_dense(np.array([[2.5, np.nan]]))
    hist = _hist(X, table, np.array([True]), np.array([-0.5]), np.array([0.25]))
    col0 = hist[table.col_offset[0] : table.col_offset[1]]
    expect = np.zeros((4 + 1, 3), np.int64)
    expect[2] = [-(1 << 29), 1 << 28, 1]
    assert np.array_equal(col0, expect)
    # the second column is missing on the only row: everything in its MISSING slot
    col1 = hist[table.col_offset[1] : table.col_offset[2]]
    assert np.array_equal(col1, [[0, 0, 0], [0, 0, 0], [-(1 << 29), 1 << 28, 1]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["numba", "numpy"]))
def test_histogram_parent_equals_children(seed, name):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 80)), int(rng.integers(1, 6))
    D = np.round(rng.normal(size=(n, k)), 2)
    D[rng.random((n, k)) < 0.4] = np.nan
    X = sparse_from_dense(D)
    table = fit_bins([(X, None)], max_bins=int(rng.integers(2, 9)))
    g = rng.normal(size=n)
    h = rng.uniform(0.01, 0.25, n)
    left = rng.random(n) < 0.5
    with _accel.use_backend(name):
        parent = _hist(X, table, np.ones(n, bool), g, h)
        a = _hist(X, table, left, g, h)
        b = _hist(X, table, ~left, g, h)
    assert np.array_equal(parent, a + b)
    assert np.array_equal(parent - a, b)


def brute_split(D, g, h, table, lam, gamma, mch, cols):
    """Try every (column, bin, missing side) by routing rows directly."""
    gq = np.rint(g * SCALE).astype(np.int64)
    hq = np.rint(h * SCALE).astype(np.int64)
    G, H, C = int(gq.sum()), int(hq.sum()), len(g)
    Gf, Hf = G * INV_SCALE, H * INV_SCALE
    parent = Gf * Gf / (Hf + lam)
    best = (0.0, -1, -1, True)
    for c in cols:
        e = table.edges[c]
        v = D[:, c]
        miss = np.isnan(v)
        b_of = np.searchsorted(e, np.where(miss, 0, v), side="left")
        for b in range(len(e) + 1):
            for dl in (True, False):
                go_left = np.where(miss, dl, b_of <= b)
                CL = int(go_left.sum())
                if CL == 0 or CL == C:
                    continue
                GL, HL = int(gq[go_left].sum()), int(hq[go_left].sum())
                HLf, HRf = HL * INV_SCALE, (H - HL) * INV_SCALE
                if HLf < mch or HRf < mch:
                    continue
                GLf, GRf = GL * INV_SCALE, (G - GL) * INV_SCALE
                gain = 0.5 * (GLf * GLf / (HLf + lam) + GRf * GRf / (HRf + lam) - parent) - gamma
                if gain > best[0]:
                    best = (gain, c, b, dl)
    return best


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["numba", "numpy"]))
def test_best_split_matches_exhaustive_search(seed, name):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(2, 60)), int(rng.integers(1, 5))
    D = np.round(rng.normal(size=(n, k)), 1)
    D[rng.random((n, k)) < 0.4] = np.nan
    X = sparse_from_dense(D)
    table = fit_bins([(X, None)], max_bins=int(rng.integers(2, 7)))
    D32 = D.astype(np.float32).astype(np.float64)
    y = rng.integers(0, 2, n)
    g, h = logistic_grad_hess(rng.normal(size=n) * 0.5, y)
    lam, gamma, mch = float(rng.uniform(0, 2)), float(rng.uniform(0, 0.2)), float(rng.choice([0.0, 0.5]))
    cols = np.arange(k)
    with _accel.use_backend(name):
        hist = _hist(X, table, np.ones(n, bool), g, h)
        gq, hq = np.rint(g * SCALE).astype(np.int64), np.rint(h * SCALE).astype(np.int64)
        gain, col, b, dl, *_ = kernels.best_split(
            hist, gq.sum(), hq.sum(), n, cols, table.col_offset, table.n_finite, lam, gamma, mch, INV_SCALE
        )
    want = brute_split(D32, g, h, table, lam, gamma, mch, cols)
    assert (col, b, dl) == want[1:]
    if col >= 0:
        assert gain == pytest.approx(want[0], rel=1e-12)


def test_missingness_split_picks_better_side(backend):
    # label is 1 exactly when the column is missing; observed values are identical
    D = np.array([[1.0], [1.0], [1.0], [np.nan], [np.nan], [np.nan]])
    y = np.array([0, 0, 0, 1, 1, 1])
    X = sparse_from_dense(D)
    table = fit_bins([(X, None)])
    g, h = logistic_grad_hess(np.zeros(6), y)
    hist = _hist(X, table, np.ones(6, bool), g, h)
    gq, hq = np.rint(g * SCALE).astype(np.int64), np.rint(h * SCALE).astype(np.int64)
    gain, col, b, dl, *_ = kernels.best_split(hist, gq.sum(), hq.sum(), 6, np.array([0]), table.col_offset, table.n_finite, 1.0, 0.0, 0.0, INV_SCALE)
    want = brute_split(D, g, h, table, 1.0, 0.0, 0.0, [0])
    assert (col, b, dl) == want[1:] and gain > 0


def test_two_row_fixture_leaf_weights(backend):
    X = sparse_from_dense(np.array([[0.0], [1.0]]))
    data = TaskData.from_memory([(X, np.array([0, 1]))])
    model = fit_gbdt(data, GbdtParams(n_trees=1, learning_rate=1.0, max_depth=1, reg_lambda=1.0, gamma=0.0, min_child_hessian=0.0))
    assert model.base_score == 0.0
    t = model.trees[0]
    assert t.feature[0] == 0
    leaves = t.value[t.left[0]], t.value[t.right[0]]
    assert leaves[0] == pytest.approx(-0.5 / 1.25, abs=1e-12)
    assert leaves[1] == pytest.approx(0.4, abs=1e-12)


def test_identical_labels_are_rejected_and_never_split():
    X = sparse_from_dense(np.array([[0.0], [1.0]]))
    with pytest.raises(DataError):
        fit_gbdt(TaskData.from_memory([(X, np.array([1, 1]))]))
    table = fit_bins([(X, None)])
    g, h = logistic_grad_hess(np.zeros(2), np.array([1, 1]))
    hist = _hist(X, table, np.ones(2, bool), g, h)
    gq, hq = np.rint(g * SCALE).astype(np.int64), np.rint(h * SCALE).astype(np.int64)
    out = kernels.best_split(hist, gq.sum(), hq.sum(), 2, np.array([0]), table.col_offset, table.n_finite, 1.0, 0.0, 0.0, INV_SCALE)
    assert out[1] == -1


# ---------------------------------------------------------------- fitting


def toy_task(rng, n=600, k=8, shards=3):
    D = np.round(rng.normal(size=(n, k)), 2)
    D[rng.random((n, k)) < 0.3] = np.nan
    logit = 1.5 * np.nan_to_num(D[:, 0]) - np.nan_to_num(D[:, 1]) + 2.0 * np.isnan(D[:, 2])
    y = (rng.random(n) < sigmoid(logit)).astype(int)
    cuts = np.linspace(0, n, shards + 1).astype(int)
    return D, y, [(sparse_from_dense(D[a:b], "h", np.arange(a, b)), y[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]


def test_no_trees_predicts_prevalence():
    rng = np.random.default_rng(0)
    _, y, parts = toy_task(rng)
    model = fit_gbdt(TaskData.from_memory(parts), GbdtParams(n_trees=0))
    p = model.predict_proba(parts[0][0])
    assert np.allclose(p, y.mean())


def test_training_loss_never_increases():
    rng = np.random.default_rng(1)
    _, _, parts = toy_task(rng)
    for eta in (0.05, 0.3):
        model = fit_gbdt(TaskData.from_memory(parts), GbdtParams(n_trees=25, learning_rate=eta, max_depth=4))
        hist = model.train_logloss
        assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_memory_modes_give_identical_models(tmp_path):
    rng = np.random.default_rng(2)
    _, _, parts = toy_task(rng)
    from sparsetab.task_cache import TaskShard

    dirs = []
    for i, (X, y) in enumerate(parts):
        TaskShard(X, y.astype(bool), np.zeros(X.n_rows, np.int64)).save(tmp_path / f"s{i}")
        dirs.append(tmp_path / f"s{i}")
    p = GbdtParams(n_trees=15, max_depth=4, colsample=0.7, seed=3)
    a = fit_gbdt(TaskData.from_dirs(dirs), p, "in_memory")
    b = fit_gbdt(TaskData.from_dirs(dirs), p, "external")
    assert a.to_json() == b.to_json()
    # external mode: one pass per grown level, at most max_depth + 1 per tree
    assert b.passes <= p.n_trees * (p.max_depth + 1)


def test_backends_give_identical_models():
    rng = np.random.default_rng(4)
    _, _, parts = toy_task(rng)
    p = GbdtParams(n_trees=10, max_depth=3)
    out = {}
    for name in ("numba", "numpy"):
        with _accel.use_backend(name):
            m = fit_gbdt(TaskData.from_memory(parts), p)
            out[name] = (m.to_json(), m.predict_scores(parts[0][0]).tobytes())
    assert out["numba"] == out["numpy"]


def test_sharding_does_not_change_the_model():
    rng = np.random.default_rng(5)
    D, y, parts = toy_task(rng, shards=4)
    one = [(sparse_from_dense(D, "h", np.arange(len(y))), y)]
    p = GbdtParams(n_trees=10, max_depth=4)
    assert fit_gbdt(TaskData.from_memory(parts), p).to_json() == fit_gbdt(TaskData.from_memory(one), p).to_json()


def test_predict_is_row_order_invariant():
    rng = np.random.default_rng(6)
    D, y, parts = toy_task(rng)
    model = fit_gbdt(TaskData.from_memory(parts), GbdtParams(n_trees=10))
    perm = rng.permutation(len(y))
    a = model.predict_scores(sparse_from_dense(D))
    b = model.predict_scores(sparse_from_dense(D[perm]))
    assert np.array_equal(a[perm], b)


def test_missingness_alone_is_learnable():
    rng = np.random.default_rng(7)
    n = 2000
    y = rng.integers(0, 2, n)
    D = np.where(y[:, None] == 1, np.nan, rng.normal(size=(n, 1)))
    D = np.c_[D, rng.normal(size=(n, 3))]
    tr, te = slice(0, 1500), slice(1500, n)
    model = fit_gbdt(TaskData.from_memory([(sparse_from_dense(D[tr]), y[tr])]), GbdtParams(n_trees=20, max_depth=3))
    assert auroc(model.predict_scores(sparse_from_dense(D[te])), y[te]) >= 0.95


def test_model_roundtrip_and_schema_check(tmp_path):
    rng = np.random.default_rng(8)
    _, _, parts = toy_task(rng)
    model = fit_gbdt(TaskData.from_memory(parts), GbdtParams(n_trees=5))
    model.save(tmp_path / "m.json")
    back = load_model(tmp_path / "m.json", schema_hash="h")
    assert back.to_json() == model.to_json()
    assert np.array_equal(back.predict_scores(parts[1][0]), model.predict_scores(parts[1][0]))
    doc = json.loads((tmp_path / "m.json").read_text())
    assert {"params", "base_score", "bin_edges", "trees", "feature_mask", "schema_hash", "seed"} <= doc.keys()
    with pytest.raises(DataError):
        load_model(tmp_path / "m.json", schema_hash="other")


def test_gbdt_param_validation():
    with pytest.raises(ConfigError):
        GbdtParams(max_depth=0)
    with pytest.raises(ConfigError):
        GbdtParams(colsample=0.0)
    with pytest.raises(ConfigError):
        fit_gbdt(TaskData.from_memory(toy_task(np.random.default_rng(0))[2]), GbdtParams(n_trees=1), "swap")


# ---------------------------------------------------------------- SGD


def test_sgd_separates_toy_data():
    rng = np.random.default_rng(9)
    X = rng.uniform(-1, 1, size=(200, 2))
    y = (X[:, 0] + 0.5 * X[:, 1] > 0).astype(int)
    keep = np.abs(X[:, 0] + 0.5 * X[:, 1]) > 0.1
    X, y = X[keep], y[keep]
    data = TaskData.from_memory([(sparse_from_dense(X), y)])
    model = fit_sgd_logistic(data, SgdParams(epochs=50, learning_rate=0.5, l2=0.0))
    assert np.mean((model.predict_scores(sparse_from_dense(X)) > 0) == y) == 1.0


def test_sgd_zero_epochs():
    data = TaskData.from_memory([(sparse_from_dense(np.eye(3)), np.array([0, 1, 1]))])
    model = fit_sgd_logistic(data, SgdParams(epochs=0))
    assert model.weights.tolist() == [0.0, 0.0, 0.0]
    assert model.predict_proba(sparse_from_dense(np.eye(3))).tolist() == [0.5, 0.5, 0.5]


def test_sgd_l2_shrinks_weights():
    rng = np.random.default_rng(10)
    _, _, parts = toy_task(rng)
    data = TaskData.from_memory(parts)
    norms = [np.linalg.norm(fit_sgd_logistic(data, SgdParams(epochs=10, l2=l2)).weights) for l2 in (0.0, 0.01, 0.1, 1.0, 10.0)]
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 0.05 * norms[0]


def test_sgd_backends_agree():
    rng = np.random.default_rng(11)
    _, _, parts = toy_task(rng)
    out = {}
    for name in ("numba", "numpy"):
        with _accel.use_backend(name):
            out[name] = fit_sgd_logistic(TaskData.from_memory(parts), SgdParams(epochs=3)).to_json()
    assert out["numba"] == out["numpy"]


def test_sgd_with_imputation_and_scaling(tmp_path):
    rng = np.random.default_rng(12)
    _, _, parts = toy_task(rng)
    model = fit_sgd_logistic(TaskData.from_memory(parts), SgdParams(epochs=5, impute="mean", standardize=True))
    model.save(tmp_path / "lin.json")
    back = load_model(tmp_path / "lin.json")
    assert np.array_equal(back.predict_scores(parts[0][0]), model.predict_scores(parts[0][0]))


def test_sgd_divergence_is_reported():
    X = sparse_from_dense(np.array([[1e200], [-1e200]]))
    with pytest.raises(ConfigError):
        fit_sgd_logistic(TaskData.from_memory([(X, np.array([1, 0]))]), SgdParams(epochs=3, learning_rate=1e10))
