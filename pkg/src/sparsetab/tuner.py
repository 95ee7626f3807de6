"""Seeded random search over featurization masks and learner hyperparameters.

Featurization options are realized as column masks over one superset
tabularization; nothing is re-tabularized per trial. Subjects are split into
train / tuning / test by a seeded hash, trials are scored on tuning AUROC, the
winner is refit on train + tuning and scored once on test.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .feature_ops import column_correlations, filter_codes, top_r_indices
from .hashing import config_hash, file_sha256, subject_unit_interval
from .io import atomic_write_json
from .learner import GbdtParams, SgdParams, TaskData, auroc, fit_gbdt, fit_sgd_logistic, logloss
from .tabularizer.schema import AGGS, FeatureSchema, parse_aggs, parse_windows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchSpace:
    windows: tuple[str, ...]
    aggs: tuple[str, ...]
    min_code_count: tuple[int | None, ...] = (None,)
    max_included_codes: tuple[int | None, ...] = (None,)
    max_by_correlation: tuple[int | None, ...] = (None,)
    learner: str = "gbdt"
    max_depth: tuple[int, int] = (2, 10)
    learning_rate: tuple[float, float] = (0.01, 0.5)
    reg_lambda: tuple[float, float] = (0.1, 100.0)
    gamma: tuple[float, float] = (0.0, 5.0)
    colsample: tuple[float, float] = (0.3, 1.0)
    n_trees: tuple[int, int] = (50, 1000)
    sgd_learning_rate: tuple[float, float] = (1e-3, 0.3)
    sgd_l2: tuple[float, float] = (1e-6, 1e-1)
    sgd_epochs: tuple[int, int] = (5, 30)

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(str(w) for w in parse_windows(self.windows)))
        object.__setattr__(self, "aggs", tuple(parse_aggs(self.aggs)))
        if not self.windows or not self.aggs:
            raise ConfigError("search space needs at least one window and one aggregation")
        if self.learner not in ("gbdt", "sgd"):
            raise ConfigError("learner must be gbdt or sgd")
        for name in ("max_depth", "learning_rate", "reg_lambda", "gamma", "colsample", "n_trees"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"search range {name} is empty")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def default_trial(self) -> dict:
        """The un-tuned configuration: every option on, default learner settings."""
        params = asdict(GbdtParams()) if self.learner == "gbdt" else asdict(SgdParams())
        params.pop("seed")
        return {
            "windows": list(self.windows),
            "aggs": list(self.aggs),
            "min_code_count": self.min_code_count[0],
            "max_included_codes": self.max_included_codes[0],
            "max_by_correlation": self.max_by_correlation[0],
            "learner": self.learner,
            "params": params,
        }


def _subset(rng: np.random.Generator, items: tuple) -> list:
    take = rng.random(len(items)) < 0.5
    if not take.any():
        take[rng.integers(len(items))] = True
    return [x for x, t in zip(items, take) if t]


def _log_uniform(rng, lo, hi) -> float:
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi)))) if lo < hi else float(lo)


def sample_trial(space: SearchSpace, master_seed: int, trial_id: int) -> dict:
    """Deterministic in (master_seed, trial_id); trial 0 is the default configuration."""
    if trial_id == 0:
        return space.default_trial()
    rng = np.random.default_rng([master_seed, trial_id])
    cfg = {
        "windows": _subset(rng, space.windows),
        "aggs": _subset(rng, space.aggs),
        "min_code_count": space.min_code_count[rng.integers(len(space.min_code_count))],
        "max_included_codes": space.max_included_codes[rng.integers(len(space.max_included_codes))],
        "max_by_correlation": space.max_by_correlation[rng.integers(len(space.max_by_correlation))],
        "learner": space.learner,
    }
    if space.learner == "gbdt":
        cfg["params"] = {
            "max_depth": int(rng.integers(space.max_depth[0], space.max_depth[1] + 1)),
            "learning_rate": _log_uniform(rng, *space.learning_rate),
            "reg_lambda": _log_uniform(rng, *space.reg_lambda),
            "gamma": float(rng.uniform(*space.gamma)),
            "colsample": float(rng.uniform(*space.colsample)),
            "n_trees": int(rng.integers(space.n_trees[0], space.n_trees[1] + 1)),
        }
    else:
        cfg["params"] = {
            "learning_rate": _log_uniform(rng, *space.sgd_learning_rate),
            "l2": _log_uniform(rng, *space.sgd_l2),
            "epochs": int(rng.integers(space.sgd_epochs[0], space.sgd_epochs[1] + 1)),
            "standardize": True,
            "impute": None,
        }
    return cfg


# ---------------------------------------------------------------- splits and masks


@dataclass
class SplitPlan:
    train: np.ndarray
    tuning: np.ndarray
    test: np.ndarray

    @classmethod
    def from_subjects(cls, subjects: np.ndarray, seed: int, fractions=(0.6, 0.2, 0.2)) -> SplitPlan:
        subjects = np.unique(np.asarray(subjects, np.int64))
        u = subject_unit_interval(subjects, seed)
        a = fractions[0]
        b = fractions[0] + fractions[1]
        return cls(subjects[u < a], subjects[(u >= a) & (u < b)], subjects[u >= b])

    def sizes(self) -> dict:
        return {"train": len(self.train), "tuning": len(self.tuning), "test": len(self.test)}


def featurization_mask(schema: FeatureSchema, metadata, cfg: dict) -> np.ndarray:
    """Columns kept by a trial's window / agg / code-frequency choices."""
    windows = {str(w) for w in parse_windows(cfg["windows"])}
    aggs = set(cfg["aggs"])
    codes = filter_codes(
        metadata, min_code_count=cfg.get("min_code_count"), max_included_codes=cfg.get("max_included_codes")
    )
    return np.array(
        [
            c.code in codes and c.agg in aggs and (c.window is None or str(c.window) in windows)
            for c in schema.columns
        ],
        dtype=bool,
    )


def trial_mask(schema, metadata, cfg: dict, correlations: np.ndarray | None) -> np.ndarray:
    mask = featurization_mask(schema, metadata, cfg)
    R = cfg.get("max_by_correlation")
    C = cfg.get("min_correlation")
    if (R is not None or C is not None) and correlations is None:
        raise ConfigError("correlation-based selection needs column correlations")
    if C is not None:
        mask &= np.abs(correlations) >= float(C)
    if R is not None:
        idx = np.flatnonzero(mask)
        keep = idx[top_r_indices(correlations[idx], min(int(R), len(idx)))]
        mask = np.zeros_like(mask)
        mask[keep] = True
    return mask


def _fit(data: TaskData, cfg: dict, seed: int, memory_mode: str):
    if cfg["learner"] == "gbdt":
        return fit_gbdt(data, GbdtParams(seed=seed, **cfg["params"]), memory_mode)
    return fit_sgd_logistic(data, SgdParams(seed=seed, **cfg["params"]))


def _score(model, data: TaskData) -> tuple[np.ndarray, np.ndarray]:
    scores, ys = [], []
    for X, y in data:
        scores.append(model.predict_scores(X))
        ys.append(y)
    return np.concatenate(scores), np.concatenate(ys)


@dataclass
class TrialResult:
    trial_id: int
    config: dict
    tuning_auroc: float | None
    wall_time_s: float
    model_path: str | None
    n_features: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepResult:
    best: TrialResult
    trials: list[TrialResult]
    final_report: dict
    model: object = field(repr=False, default=None)


def run_sweep(
    data: TaskData,
    schema: FeatureSchema,
    metadata,
    space: SearchSpace,
    budget: int,
    master_seed: int,
    out_dir: str | Path,
    jobs: int = 1,
    memory_mode: str = "in_memory",
) -> SweepResult:
    if budget < 1:
        raise ConfigError("budget must be >= 1")
    out_dir = Path(out_dir)
    if memory_mode == "in_memory":
        data = data.cached()
    plan = SplitPlan.from_subjects(data.row_subjects(), master_seed)
    train = data.restrict(subjects=plan.train)
    tuning = data.restrict(subjects=plan.tuning)

    correlations = None
    if any(r is not None for r in space.max_by_correlation):
        correlations = column_correlations(train)

    def run(trial_id: int) -> TrialResult:
        cfg = sample_trial(space, master_seed, trial_id)
        t0 = time.perf_counter()
        try:
            mask = trial_mask(schema, metadata, cfg, correlations)
            if not mask.any():
                raise ConfigError("trial selects no columns")
            model = _fit(train.restrict(col_mask=mask), cfg, master_seed, memory_mode)
            s, y = _score(model, tuning.restrict(col_mask=mask))
            score = auroc(s, y)
            path = out_dir / "trials" / f"trial_{trial_id:04d}.json"
            model.save(path)
            return TrialResult(trial_id, cfg, score, time.perf_counter() - t0, str(path.relative_to(out_dir)), int(mask.sum()))
        except (ConfigError, DataError) as exc:
            log.warning("trial %d failed: %s", trial_id, exc)
            return TrialResult(trial_id, cfg, None, time.perf_counter() - t0, None, 0, str(exc))

    ids = list(range(budget))
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(run, ids))
    else:
        trials = [run(i) for i in ids]
    trials.sort(key=lambda t: t.trial_id)
    ok = [t for t in trials if t.tuning_auroc is not None]
    if not ok:
        raise DataError("every trial failed; see sweep_report.json")
    best = min(ok, key=lambda t: (-t.tuning_auroc, t.trial_id))

    # refit on train + tuning, then the single look at test
    mask = trial_mask(schema, metadata, best.config, correlations)
    refit_data = data.restrict(subjects=np.union1d(plan.train, plan.tuning), col_mask=mask)
    model = _fit(refit_data, best.config, master_seed, memory_mode)
    model_path = out_dir / "model.json"
    model.save(model_path)
    s, y = _score(model, data.restrict(subjects=plan.test, col_mask=mask))
    final = {
        "best_trial": best.trial_id,
        "best_config": best.config,
        "tuning_auroc": best.tuning_auroc,
        "test_auroc": auroc(s, y),
        "test_logloss": logloss(s, y),
        "n_test_rows": int(len(y)),
        "splits": plan.sizes(),
        "budget": budget,
        "master_seed": master_seed,
        "schema_hash": schema.schema_hash,
        "model_file": "model.json",
        "model_sha256": file_sha256(model_path),
        "space_hash": config_hash(space.to_dict()),
    }
    atomic_write_json(
        out_dir / "sweep_report.json",
        {"space": space.to_dict(), "trials": [t.to_dict() for t in trials], "best_trial": best.trial_id},
    )
    atomic_write_json(out_dir / "final_report.json", final)
    return SweepResult(best, trials, final, model)


def run_single(
    data: TaskData,
    schema: FeatureSchema,
    metadata,
    cfg: dict,
    seed: int,
    out_dir: str | Path,
    memory_mode: str = "in_memory",
) -> dict:
    """One fixed configuration: fit on train + tuning, score once on test."""
    out_dir = Path(out_dir)
    plan = SplitPlan.from_subjects(data.row_subjects(), seed)
    correlations = None
    fit_subjects = np.union1d(plan.train, plan.tuning)
    if cfg.get("max_by_correlation") is not None or cfg.get("min_correlation") is not None:
        correlations = column_correlations(data.restrict(subjects=plan.train))
    mask = trial_mask(schema, metadata, cfg, correlations)
    model = _fit(data.restrict(subjects=fit_subjects, col_mask=mask), cfg, seed, memory_mode)
    model.save(out_dir / "model.json")
    s, y = _score(model, data.restrict(subjects=plan.test, col_mask=mask))
    final = {
        "config": cfg,
        "test_auroc": auroc(s, y),
        "test_logloss": logloss(s, y),
        "n_test_rows": int(len(y)),
        "splits": plan.sizes(),
        "seed": seed,
        "schema_hash": schema.schema_hash,
        "model_file": "model.json",
        "model_sha256": file_sha256(out_dir / "model.json"),
    }
    atomic_write_json(out_dir / "final_report.json", final)
    return final


__all__ = [
    "AGGS",
    "SearchSpace",
    "SplitPlan",
    "SweepResult",
    "TrialResult",
    "featurization_mask",
    "run_single",
    "run_sweep",
    "sample_trial",
    "trial_mask",
]
