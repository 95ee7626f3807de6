"""Acceptance suite: one PASS/FAIL line per criterion, printed in the pytest summary.

Run alone with ``pytest tests/test_acceptance.py -v``. Each test also enforces
its runtime ceiling.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from builders import planted_task, task_inputs
from conftest import ACCEPTANCE_LINES
from test_feature_ops import meta
from oracles import (
    DAY,
    auroc_pairs,
    compare_to_dense,
    pearson_dense,
    random_micro_events,
    random_sparse_dense,
    sparse_from_dense,
)
from sparsetab.bench import run_bench
from sparsetab.config import Config
from sparsetab.event_store import Event, EventShard, describe, summarize_codes
from sparsetab.feature_ops import column_correlations, select_codes, select_columns
from sparsetab.learner import GbdtParams, TaskData, auroc, fit_bins, fit_gbdt, logistic_grad_hess, logloss
from sparsetab.learner import kernels
from sparsetab.learner.binning import bin_entries
from sparsetab.pipeline import run_pipeline, run_stage
from sparsetab.sparse import vstack
from sparsetab.synthetic import PlantedRule, SynthSpec, generate_synthetic
from sparsetab.tabularizer import AGGS, TabConfig, build_feature_schema, tabularize_shard
from sparsetab.tabularizer.store import load_full, save_schema, write_static, write_time_series
from sparsetab.task_cache import Labels, build_task_shard


@contextmanager
def criterion(num: int, title: str, limit_s: float):
    notes = {}
    t0 = time.perf_counter()
    ok = False
    try:
        yield notes
        elapsed = time.perf_counter() - t0
        assert elapsed < limit_s, f"runtime {elapsed:.1f}s exceeds {limit_s:.0f}s"
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        detail = " ".join(f"{k}={v}" for k, v in notes.items())
        line = f"{'PASS' if ok else 'FAIL'} [{num}] {title} ({elapsed:.1f}s, limit {limit_s:.0f}s) {detail}".rstrip()
        print(line)
        ACCEPTANCE_LINES.append(line)


# ---------------------------------------------------------------- 1


def test_c1_tabularization_matches_dense_oracle():
    with criterion(1, "tabularization equals dense recomputation on 200 micro-datasets", 30) as notes:
        bad = 0
        cells = 0
        for seed in range(200):
            events = random_micro_events(np.random.default_rng(seed))
            shard = EventShard.from_events(events).sorted()
            schema = build_feature_schema(summarize_codes([shard]), TabConfig(windows=("1d", "7d", "full"), aggs=AGGS))
            X = tabularize_shard(shard, schema)
            cells += X.n_rows * X.n_cols
            if compare_to_dense(events, schema, X):
                bad += 1
        notes.update(datasets=200, cells=cells, mismatching=bad)
        assert bad == 0


# ---------------------------------------------------------------- 2


def _tabularize_all(root, shards, spec):
    ds, _ = generate_synthetic(spec, root, shards)
    meta = describe(ds)
    schema = build_feature_schema(meta, TabConfig(windows=("1d", "7d", "30d", "full"), aggs=AGGS))
    tab = root / "tabularized"
    save_schema(schema, tab)
    write_static(ds, schema, tab)
    write_time_series(ds, schema, tab)
    X = vstack([load_full(tab, name, schema) for name in ds.shard_names])
    order = np.lexsort((X.row_time, X.row_subject))
    return X.take_rows(order)


def test_c2_shard_invariance(tmp_path):
    with criterion(2, "1 vs 8 shards give byte-identical matrices", 120) as notes:
        spec = SynthSpec(1000, n_codes=20, events_per_subject=30, seed=11)
        one = _tabularize_all(tmp_path / "one", 1, spec)
        eight = _tabularize_all(tmp_path / "eight", 8, spec)
        notes.update(rows=one.n_rows, cols=one.n_cols, nnz=one.nnz)
        assert one.content_bytes() == eight.content_bytes()


# ---------------------------------------------------------------- 3


def _aligned_row(events, schema, subject, pt):
    shard = EventShard.from_events(events).sorted()
    task, _ = build_task_shard(tabularize_shard(shard, schema), Labels.build([subject], [pt], [1]), "strict_before")
    return task.X.content_bytes()


def test_c3_no_leakage_from_future_events():
    with criterion(3, "aligned rows ignore events at or after prediction time", 60) as notes:
        rng = np.random.default_rng(3)
        failures = 0
        placements = 0
        while placements < 100:
            events = random_micro_events(rng, max_subjects=3)
            timed = [e for e in events if e.time is not None]
            if not timed:
                continue
            shard = EventShard.from_events(events).sorted()
            schema = build_feature_schema(summarize_codes([shard]), TabConfig(windows=("1d", "7d", "full"), aggs=AGGS))
            anchor = timed[int(rng.integers(len(timed)))]
            pt = anchor.time + int(rng.integers(0, 2 * DAY))
            base = _aligned_row(events, schema, anchor.subject_id, pt)
            cut = [e for e in events if e.time is None or e.time < pt]
            late = Event(anchor.subject_id, pt + int(rng.integers(0, 3 * DAY)), anchor.code, float(rng.normal()))
            for variant in (cut, events + [late]):
                if _aligned_row(variant, schema, anchor.subject_id, pt) != base:
                    failures += 1
            placements += 1
        notes.update(placements=placements, failures=failures)
        assert failures == 0


# ---------------------------------------------------------------- 4


def _sweep_auroc(root, rule, noise):
    cfg = planted_task(
        root, n_subjects=2000, shards=4, rule=rule, noise=noise, events_per_subject=40,
        **{"model.sweep": True, "model.budget": 20, "model.seed": 0},
    )
    run_stage("model", cfg, root)
    return json.loads((root / "models" / "task" / "final_report.json").read_text())["test_auroc"]


def test_c4_planted_signal_is_learned_and_noise_is_not(tmp_path):
    with criterion(4, "planted sweep AUROC >= 0.95 and noise task within 0.5 +- 0.05", 300) as notes:
        planted = _sweep_auroc(tmp_path / "planted", "count(SIG,7d)>=3", 0.05)
        noise = _sweep_auroc(tmp_path / "noise", "noise", 0.0)
        notes.update(planted_auroc=round(planted, 4), noise_auroc=round(noise, 4))
        assert planted >= 0.95
        assert abs(noise - 0.5) <= 0.05


# ---------------------------------------------------------------- 5


def test_c5_external_memory_equivalence(tmp_path):
    with criterion(5, "in-memory and external training give identical model bytes", 180) as notes:
        planted_task(tmp_path, n_subjects=1000, shards=4)
        data, _, _ = task_inputs(tmp_path)
        p = GbdtParams(n_trees=60, max_depth=5, learning_rate=0.1, colsample=0.8, seed=7)
        a = fit_gbdt(data, p, "in_memory")
        b = fit_gbdt(data, p, "external")
        a.save(tmp_path / "a.json")
        b.save(tmp_path / "b.json")
        notes.update(trees=len(a.trees), external_passes=b.passes)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


# ---------------------------------------------------------------- 6


def test_c6_metric_and_math_oracles():
    with criterion(6, "AUROC, gradients, histograms and leaf weights match oracles", 60) as notes:
        rng = np.random.default_rng(6)
        worst_auc = 0.0
        for n in (2, 10, 100, 500, 2000):
            y = rng.integers(0, 2, n)
            y[:2] = [0, 1]
            s = np.round(rng.normal(size=n), 1)
            worst_auc = max(worst_auc, abs(auroc(s, y) - auroc_pairs(s.tolist(), y.tolist())))
        assert worst_auc <= 1e-9

        worst_grad = 0.0
        eps = 1e-4
        for s0 in np.linspace(-6, 6, 49):
            for yv in (0, 1):
                ell = lambda v: logloss(np.array([v]), np.array([yv]))  # noqa: E731
                g, h = logistic_grad_hess(np.array([s0]), np.array([yv]))
                gp, _ = logistic_grad_hess(np.array([s0 + eps]), np.array([yv]))
                gm, _ = logistic_grad_hess(np.array([s0 - eps]), np.array([yv]))
                worst_grad = max(
                    worst_grad,
                    abs(g[0] - (ell(s0 + eps) - ell(s0 - eps)) / (2 * eps)),
                    abs(h[0] - (gp[0] - gm[0]) / (2 * eps)),
                )
        assert worst_grad <= 1e-4

        hist_ok = True
        for trial in range(20):
            D = np.round(rng.normal(size=(200, 6)), 1)
            D[rng.random(D.shape) < 0.5] = np.nan
            X = sparse_from_dense(D)
            table = fit_bins([(X, None)], max_bins=8)
            bins = bin_entries(X, table)
            gq = rng.integers(-(1 << 29), 1 << 29, 200)
            hq = rng.integers(0, 1 << 28, 200)
            node = (rng.random(200) < 0.5).astype(np.int64)
            out = np.zeros((2, table.total_bins, 3), np.int64)
            kernels.accumulate_histograms(X.indptr.astype(np.int64), X.indices.astype(np.int64), bins, node, np.array([0, 1]), table.col_offset, gq, hq, out)
            parent = np.zeros((1, table.total_bins, 3), np.int64)
            kernels.accumulate_histograms(X.indptr.astype(np.int64), X.indices.astype(np.int64), bins, np.zeros(200, np.int64), np.array([0]), table.col_offset, gq, hq, parent)
            hist_ok &= bool(np.array_equal(parent[0], out[0] + out[1]))
        assert hist_ok

        X = sparse_from_dense(np.array([[0.0], [1.0]]))
        m = fit_gbdt(TaskData.from_memory([(X, np.array([0, 1]))]), GbdtParams(n_trees=1, learning_rate=1.0, max_depth=1, reg_lambda=1.0, gamma=0.0, min_child_hessian=0.0))
        t = m.trees[0]
        leaves = [t.value[t.left[0]], t.value[t.right[0]]]
        # G = +-0.5, H = 0.25 per child, lambda = 1
        assert leaves == [pytest.approx(-0.4, abs=1e-12), pytest.approx(0.4, abs=1e-12)]
        notes.update(auroc_err=f"{worst_auc:.1e}", grad_err=f"{worst_grad:.1e}", leaves=[round(float(v), 6) for v in leaves])


# ---------------------------------------------------------------- 7


def test_c7_scaling_bench(tmp_path):
    with criterion(7, "doubling events: wall ratio < 2.5, peak memory ratio < 1.5", 300) as notes:
        report = run_bench([25_000, 50_000, 100_000], out=tmp_path / "bench.json", workdir=tmp_path / "w", timeout=240, repeats=7)
        runs = report["runs"]
        assert all(r["status"] == "ok" for r in runs), runs
        wall = [r["wall_ratio_vs_prev"] for r in runs[1:]]
        peak = [r["peak_ratio_vs_prev"] for r in runs[1:]]
        notes.update(events=[r["events"] for r in runs], wall_ratios=[round(x, 2) for x in wall], peak_ratios=[round(x, 3) for x in peak])
        assert all(x < 2.5 for x in wall)
        assert all(x < 1.5 for x in peak)


# ---------------------------------------------------------------- 8


def _dense_top(r, R):
    return sorted(range(len(r)), key=lambda j: (-abs(r[j]), j))[:R]


def test_c8_feature_selection():
    with criterion(8, "top-R masks match dense ranking; thresholds are monotone", 120) as notes:
        rng = np.random.default_rng(8)
        mismatches = 0
        checked = 0
        for n, k in ((1000, 200), (300, 50), (50, 120)):
            D = random_sparse_dense(rng, n, k, density=float(rng.uniform(0.05, 0.6)))
            y = rng.integers(0, 2, n)
            # give some columns real signal so the ranking is not all noise
            D[:, : k // 10] = np.where(np.isnan(D[:, : k // 10]), np.nan, y[:, None] + rng.normal(0, 1, (n, k // 10)))
            cuts = np.linspace(0, n, 5).astype(int)
            pieces = [(sparse_from_dense(D[a:b]), y[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]
            r = column_correlations(pieces)
            ref = pearson_dense(D, y)
            for R in (1, 5, 17, k // 2, k):
                got = np.flatnonzero(select_columns(r, "max_by_correlation", R).mask).tolist()
                mismatches += got != sorted(_dense_top(ref, R))
                checked += 1
            prev = None
            for C in np.linspace(0, 1, 21):
                m = select_columns(r, "min_correlation", C).mask
                assert prev is None or not (m & ~prev).any()
                prev = m
        cm = meta({f"C{i}": int(c) for i, c in enumerate(rng.integers(1, 100, 60))})
        for t in range(1, 100):
            assert select_codes(cm, "min_code_count", t + 1) <= select_codes(cm, "min_code_count", t)
        for K in range(1, 60):
            assert select_codes(cm, "max_included_codes", K) <= select_codes(cm, "max_included_codes", K + 1)
        notes.update(rankings_checked=checked, mismatches=mismatches)
        assert mismatches == 0


# ---------------------------------------------------------------- 9


def test_c9_pipeline_determinism_and_caching(tmp_path):
    with criterion(9, "two pipeline runs agree byte for byte; rerun rebuilds nothing", 180) as notes:
        spec = SynthSpec(600, n_codes=12, events_per_subject=40, planted_rule=PlantedRule.parse("count(SIG,7d)>=3"), seed=21)
        outputs = []
        for name in ("a", "b"):
            root = tmp_path / name
            _, labels = generate_synthetic(spec, root, 3)
            cfg = Config.build(
                overrides={
                    "tabularization.windows": ["7d", "30d", "full"],
                    "task.labels": str(labels),
                    "model.sweep": True,
                    "model.budget": 3,
                    "model.seed": 5,
                }
            )
            first = run_pipeline(cfg, root)
            assert not any(o.cached for o in first)
            outputs.append(
                tuple((root / "models" / "task" / f).read_bytes() for f in ("final_report.json", "model.json"))
            )
            rerun = run_pipeline(cfg, root)
            rebuilt = [o.stage for o in rerun if not o.cached]
            assert rebuilt == [], rebuilt
        notes.update(identical=outputs[0] == outputs[1], rebuilt_on_rerun=0)
        assert outputs[0] == outputs[1]
