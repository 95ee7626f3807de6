"""Seeded synthetic event datasets with planted-signal labels.

Labels are placed one microsecond after a real event time, so the latest
strictly-prior event row sees exactly the same trailing window as the rule.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pyarrow as pa
import pyarrow.parquet as pq

from .errors import ConfigError
from .event_store import EventShard, ShardedDataset, _write_parquet, write_dataset
from .hashing import config_hash
from .tabularizer.schema import WindowSpec

BASE_TIME_US = 1_577_836_800_000_000  # 2020-01-01T00:00:00Z
SECOND_US = 1_000_000
DAY_US = 86_400 * SECOND_US

_RULE = re.compile(r"^\s*count\(\s*(?P<code>[^,\s]+)\s*,\s*(?P<window>\w+)\s*\)\s*>=\s*(?P<k>\d+)\s*$")


@dataclass(frozen=True)
class PlantedRule:
    """``label = count(code in trailing window) >= threshold``, or pure noise.

    ``noise`` is the fraction of labels replaced by a fair coin flip, so the
    expected rate of flipped labels is ``noise / 2``.
    """

    kind: str = "count_at_least"
    code: str = "SIG"
    window: str = "7d"
    threshold: int = 3
    noise: float = 0.0

    def __post_init__(self):
        if self.kind not in ("count_at_least", "noise"):
            raise ConfigError(f"unknown planted rule kind {self.kind!r}")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("noise must lie in [0, 1]")
        WindowSpec.parse(self.window)

    @classmethod
    def parse(cls, text: str, noise: float = 0.0) -> PlantedRule:
        if text.strip().lower() == "noise":
            return cls(kind="noise", noise=1.0)
        m = _RULE.match(text)
        if not m:
            raise ConfigError(f"cannot parse planted rule {text!r}; expected e.g. 'count(SIG,7d)>=3' or 'noise'")
        return cls(code=m["code"], window=m["window"], threshold=int(m["k"]), noise=noise)


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int
    n_codes: int = 20
    events_per_subject: int = 60
    planted_rule: PlantedRule = field(default_factory=PlantedRule)
    seed: int = 0
    labels_per_subject: int = 2
    span_days: int = 60
    value_missing_rate: float = 0.1

    def __post_init__(self):
        for name in ("n_subjects", "n_codes", "events_per_subject", "labels_per_subject", "span_days"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def code_vocabulary(n_codes: int, signal_code: str = "SIG") -> tuple[list[str], np.ndarray]:
    """Timed codes and whether each one carries numeric values."""
    codes = [signal_code]
    has_value = [False]
    for j in range(1, n_codes):
        if j % 2:
            codes.append(f"LAB_{j:03d}")
            has_value.append(True)
        else:
            codes.append(f"DX_{j:03d}")
            has_value.append(False)
    return codes, np.array(has_value)


def _events(spec: SynthSpec, rng: np.random.Generator) -> EventShard:
    n, e = spec.n_subjects, spec.events_per_subject
    subjects = np.arange(1, n + 1, dtype=np.int64)
    codes, code_has_value = code_vocabulary(spec.n_codes, spec.planted_rule.code)
    span_s = spec.span_days * 86_400

    # subject-level signal intensity; mean in-window SIG count sits near the threshold
    rule_window = WindowSpec.parse(spec.planted_rule.window)
    window_days = spec.span_days if rule_window.is_full else rule_window.duration_us / DAY_US
    target = max(spec.planted_rule.threshold, 1) + 0.5
    base = target * spec.span_days / max(window_days, 1e-9) / e
    p_sig = np.clip(rng.uniform(0.0, 2.0 * base, size=n), 0.0, 0.9) if spec.n_codes > 1 else np.ones(n)

    subj = np.repeat(subjects, e)
    t = BASE_TIME_US + rng.integers(0, span_s, size=n * e) * SECOND_US
    is_sig = rng.random(n * e) < np.repeat(p_sig, e)
    if spec.n_codes > 1:
        ranks = np.arange(1, spec.n_codes)
        weights = 1.0 / ranks
        other = 1 + rng.choice(spec.n_codes - 1, size=n * e, p=weights / weights.sum())
    else:
        other = np.zeros(n * e, np.int64)
    code_idx = np.where(is_sig, 0, other)
    vals = np.full(n * e, np.nan)
    has_val = code_has_value[code_idx] & (rng.random(n * e) >= spec.value_missing_rate)
    centers = np.linspace(1.0, 100.0, spec.n_codes)
    vals[has_val] = np.round(rng.normal(centers[code_idx[has_val]], 5.0), 2)

    sex = np.where(rng.random(n) < 0.5, "SEX//F", "SEX//M")
    height = np.round(rng.normal(170.0, 10.0, size=n), 1)
    vocab = np.array(codes, dtype=object)
    return EventShard.concat(
        [
            EventShard(subjects, np.zeros(n, np.int64), np.zeros(n, bool), sex.astype(object), np.full(n, np.nan)),
            EventShard(subjects, np.zeros(n, np.int64), np.zeros(n, bool), np.full(n, "HEIGHT", object), height),
            EventShard(subj, t, np.ones(n * e, bool), vocab[code_idx], vals),
        ]
    )


def _labels(events: EventShard, spec: SynthSpec, rng: np.random.Generator) -> pa.Table:
    rule = spec.planted_rule
    timed = events.take(np.flatnonzero(events.has_time))
    order = np.lexsort((timed.time, timed.subject_id))
    timed = timed.take(order)
    sig = timed.code == rule.code
    window = WindowSpec.parse(rule.window)

    out_s, out_t, out_y = [], [], []
    starts = np.flatnonzero(np.r_[True, timed.subject_id[1:] != timed.subject_id[:-1]])
    ends = np.r_[starts[1:], len(timed)]
    for a, b in zip(starts, ends):
        times = np.unique(timed.time[a:b])
        k = min(spec.labels_per_subject, len(times))
        picks = np.sort(rng.choice(times, size=k, replace=False))
        pred = picks + 1
        sig_times = timed.time[a:b][sig[a:b]]
        if rule.kind == "noise":
            y = rng.integers(0, 2, size=k).astype(bool)
        else:
            hi = np.searchsorted(sig_times, pred, side="right")
            if window.is_full:
                lo = np.zeros_like(hi)
            else:
                lo = np.searchsorted(sig_times, pred - window.duration_us, side="right")
            y = (hi - lo) >= rule.threshold
            flip = rng.random(k) < rule.noise
            y = np.where(flip, rng.integers(0, 2, size=k).astype(bool), y)
        out_s.append(np.full(k, timed.subject_id[a]))
        out_t.append(pred)
        out_y.append(y)
    cat = (lambda xs, dt: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
    return pa.table(
        {
            "subject_id": pa.array(cat(out_s, np.int64), pa.int64()),
            "prediction_time": pa.array(cat(out_t, np.int64), pa.int64()).cast(pa.timestamp("us", tz="UTC")),
            "label": pa.array(cat(out_y, bool), pa.bool_()),
        }
    )


def generate_events(spec: SynthSpec) -> tuple[EventShard, pa.Table]:
    """Events and label table, fully determined by ``spec``."""
    events_rng, label_rng = (np.random.default_rng([spec.seed, k]) for k in (0, 1))
    events = _events(spec, events_rng)
    return events, _labels(events, spec, label_rng)


def generate_synthetic(spec: SynthSpec, out_dir: str | Path, shard_count: int = 1) -> tuple[ShardedDataset, Path]:
    """Write a sharded synthetic dataset plus ``labels.parquet`` to ``out_dir``."""
    events, labels = generate_events(spec)
    out = Path(out_dir)
    cfg = {"stage": "synth", "spec": spec.to_dict(), "shard_count": shard_count}
    ds = write_dataset(
        events, out, shard_count, spec.seed, config_hash(cfg), extra={"synthetic": spec.to_dict()}
    )
    labels_path = out / "labels.parquet"
    _write_parquet(labels, labels_path)
    return ds, labels_path


def read_labels_table(path: str | Path) -> pa.Table:
    return pq.read_table(path)
