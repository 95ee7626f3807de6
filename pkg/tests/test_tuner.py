import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import planted_task, task_inputs
from sparsetab.errors import ConfigError
from sparsetab.event_store import ShardedDataset
from sparsetab.tabularizer import TabConfig, build_feature_schema, tabularize_shard
from sparsetab.tuner import SearchSpace, SplitPlan, featurization_mask, run_sweep, sample_trial, trial_mask

SPACE = SearchSpace(windows=("1d", "7d", "full"), aggs=("code/count", "value/sum"))


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    root = tmp_path_factory.mktemp("planted")
    planted_task(root)
    return root


def small_space(**kw):
    base = dict(
        windows=("7d", "30d", "full"),
        aggs=("static/present", "code/count", "value/sum"),
        max_depth=(2, 4),
        n_trees=(5, 20),
    )
    base.update(kw)
    return SearchSpace(**base)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 10_000))
def test_sample_trial_is_deterministic(seed, trial):
    assert sample_trial(SPACE, seed, trial) == sample_trial(SPACE, seed, trial)


def test_trial_zero_is_default():
    t = sample_trial(SPACE, 5, 0)
    assert t["windows"] == ["1d", "7d", "full"] and t["aggs"] == ["code/count", "value/sum"]
    assert t["params"]["n_trees"] == 100


def test_window_subsets_are_all_reachable():
    seen = {tuple(sample_trial(SPACE, 0, i)["windows"]) for i in range(1, 1001)}
    want = {c for k in (1, 2, 3) for c in combinations(SPACE.windows, k)}
    assert seen == want


def test_degenerate_space_gives_one_configuration():
    space = SearchSpace(
        windows=("7d",), aggs=("code/count",), max_depth=(3, 3), learning_rate=(0.1, 0.1), reg_lambda=(1.0, 1.0),
        gamma=(0.0, 0.0), colsample=(1.0, 1.0), n_trees=(10, 10),
    )
    distinct = {json.dumps(sample_trial(space, 1, i), sort_keys=True) for i in range(1, 50)}
    assert len(distinct) == 1


def test_empty_ranges_are_rejected():
    with pytest.raises(ConfigError):
        SearchSpace(windows=("7d",), aggs=("code/count",), max_depth=(5, 2))
    with pytest.raises(ConfigError):
        SearchSpace(windows=(), aggs=("code/count",))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-(10**9), 10**9), min_size=1, max_size=300, unique=True), st.integers(0, 2**31))
def test_split_is_a_disjoint_partition(subjects, seed):
    plan = SplitPlan.from_subjects(np.array(subjects), seed)
    parts = [set(plan.train.tolist()), set(plan.tuning.tolist()), set(plan.test.tolist())]
    assert sum(map(len, parts)) == len(subjects)
    assert set().union(*parts) == set(subjects)
    again = SplitPlan.from_subjects(np.array(subjects[::-1]), seed)
    assert again.test.tolist() == plan.test.tolist()


def test_split_fractions_are_roughly_right():
    sizes = SplitPlan.from_subjects(np.arange(20_000), 3).sizes()
    assert abs(sizes["train"] / 20_000 - 0.6) < 0.02
    assert abs(sizes["test"] / 20_000 - 0.2) < 0.02


def test_budget_one_is_the_default_trial(planted, tmp_path):
    data, schema, meta = task_inputs(planted)
    res = run_sweep(data, schema, meta, small_space(), 1, 0, tmp_path)
    assert len(res.trials) == 1 and res.best.trial_id == 0
    assert (tmp_path / "model.json").exists()
    with pytest.raises(ConfigError):
        run_sweep(data, schema, meta, small_space(), 0, 0, tmp_path)


def test_parallel_trials_match_serial(planted, tmp_path):
    data, schema, meta = task_inputs(planted)
    a = run_sweep(data, schema, meta, small_space(), 6, 4, tmp_path / "a", jobs=1)
    b = run_sweep(data, schema, meta, small_space(), 6, 4, tmp_path / "b", jobs=4)
    assert [t.tuning_auroc for t in a.trials] == [t.tuning_auroc for t in b.trials]
    assert a.final_report == b.final_report
    assert (tmp_path / "a" / "model.json").read_bytes() == (tmp_path / "b" / "model.json").read_bytes()


def test_best_trial_is_at_least_the_default(planted, tmp_path):
    data, schema, meta = task_inputs(planted)
    res = run_sweep(data, schema, meta, small_space(), 8, 1, tmp_path)
    default = res.trials[0].tuning_auroc
    assert res.best.tuning_auroc >= default
    report = json.loads((tmp_path / "final_report.json").read_text())
    assert report["test_auroc"] > 0.9
    sweep = json.loads((tmp_path / "sweep_report.json").read_text())
    assert len(sweep["trials"]) == 8


def test_masks_match_fresh_tabularization(planted):
    """A masked superset equals tabularizing directly with the trial's options."""
    data, schema, meta = task_inputs(planted)
    shard = ShardedDataset(planted).load_shard(0)
    superset = tabularize_shard(shard, schema)
    for trial in range(1, 6):
        cfg = sample_trial(small_space(max_included_codes=(None, 4)), 9, trial)
        mask = featurization_mask(schema, meta, cfg)
        sub_schema = build_feature_schema(
            meta, TabConfig(windows=tuple(cfg["windows"]), aggs=tuple(cfg["aggs"]), max_included_codes=cfg["max_included_codes"])
        )
        assert [c.name for c in schema.columns if mask[schema.columns.index(c)]] == [c.name for c in sub_schema.columns]
        fresh = tabularize_shard(shard, sub_schema)
        masked = superset.select_columns(mask)
        assert masked.to_dense().tobytes() == fresh.to_dense().tobytes()


def test_correlation_selection_needs_correlations(planted):
    _, schema, meta = task_inputs(planted)
    cfg = dict(sample_trial(small_space(), 0, 0), max_by_correlation=3)
    with pytest.raises(ConfigError):
        trial_mask(schema, meta, cfg, None)
    r = np.linspace(-1, 1, len(schema))
    assert trial_mask(schema, meta, cfg, r).sum() == 3
