"""Scaling benchmark: describe + code/count over the full history.

Each size runs in a fresh worker process on a pre-generated dataset so that
peak RSS belongs to that run alone. Shard size (subjects per shard) is held
fixed, so larger inputs mean more shards rather than bigger ones.
"""

from __future__ import annotations

import json
import os
import resource
import subprocess
import sys
import tempfile
import threading
import time
from pathlib import Path

import numpy as np
import psutil

from .io import atomic_write_json


def prepare(n_events: int, out: Path, events_per_subject: int, subjects_per_shard: int, seed: int) -> Path:
    from .synthetic import SynthSpec, generate_synthetic

    n_subjects = max(1, n_events // events_per_subject)
    shards = max(1, -(-n_subjects // subjects_per_shard))
    spec = SynthSpec(n_subjects, n_codes=50, events_per_subject=events_per_subject, seed=seed)
    generate_synthetic(spec, out, shard_count=shards)
    return out


class _RssSampler(threading.Thread):
    def __init__(self, interval: float = 0.005):
        super().__init__(daemon=True)
        self.proc = psutil.Process()
        self.interval = interval
        self.samples: list[int] = []
        self._stop_evt = threading.Event()

    def run(self):
        while not self._stop_evt.is_set():
            self.samples.append(self.proc.memory_info().rss)
            time.sleep(self.interval)

    def stop(self) -> float:
        self._stop_evt.set()
        self.join()
        self.samples.append(self.proc.memory_info().rss)
        return float(np.mean(self.samples)) / 2**20


def _warm_up() -> None:
    """Compile the kernels on a tiny dataset so JIT time is not measured."""
    from .event_store import summarize_codes
    from .synthetic import SynthSpec, generate_events
    from .tabularizer import TabConfig, build_feature_schema, tabularize_time_series

    events, _ = generate_events(SynthSpec(3, n_codes=3, events_per_subject=5))
    events = events.sorted()
    meta = summarize_codes([events])
    tabularize_time_series(events, build_feature_schema(meta, TabConfig(windows=("full",), aggs=("code/count",))))


def worker(dataset_dir: str, work_dir: str) -> dict:
    from .event_store import ShardedDataset, describe
    from .tabularizer import TabConfig, build_feature_schema
    from .tabularizer.store import write_time_series

    _warm_up()
    baseline = psutil.Process().memory_info().rss / 2**20
    sampler = _RssSampler()
    sampler.start()
    out = Path(work_dir)
    t0 = time.perf_counter()
    ds = ShardedDataset(dataset_dir)
    meta = describe(ds)
    schema = build_feature_schema(meta, TabConfig(windows=("full",), aggs=("code/count",)))
    write_time_series(ds, schema, out)
    wall = time.perf_counter() - t0
    avg = sampler.stop()
    nnz = 0
    for name in ds.shard_names:
        nnz += json.loads((out / "time_series" / name / "assembled" / "meta.json").read_text())["nnz"]
    peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0
    return {
        "subjects": ds.manifest.n_subjects,
        "events": ds.manifest.n_events,
        "codes": len(meta),
        "shards": len(ds),
        "wall_time_s": wall,
        "peak_rss_mb": peak,
        "avg_rss_mb": avg,
        "baseline_rss_mb": baseline,
        "nnz": nnz,
    }


def run_bench(
    sizes,
    out: str | Path | None = "bench_report.json",
    timeout: float = 600.0,
    events_per_subject: int = 50,
    subjects_per_shard: int = 100,
    workdir: str | Path | None = None,
    seed: int = 0,
    repeats: int = 5,
) -> dict:
    """Time each size in fresh worker processes, ``repeats`` rounds interleaved across sizes.

    Every round runs each size once, so a slow spell on a shared machine hits
    all sizes alike. ``wall_time_s`` is the median round (the minimum is kept
    as ``wall_time_min_s``), ``peak_rss_mb`` the largest.
    """
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="sparsetab-bench-")
        workdir = tmp.name
    workdir = Path(workdir)
    results: dict[int, list[dict]] = {n: [] for n in sizes}
    failed: dict[int, dict] = {}
    try:
        data = {n: prepare(n, workdir / f"data_{n}", events_per_subject, subjects_per_shard, seed) for n in sizes}
        for rnd in range(max(1, repeats)):
            for n in sizes:
                if n in failed:
                    continue
                result_file = workdir / f"result_{n}_{rnd}.json"
                cmd = [sys.executable, "-m", "sparsetab.bench", "worker", str(data[n]), str(workdir / f"tab_{n}_{rnd}"), str(result_file)]
                try:
                    subprocess.run(cmd, check=True, timeout=timeout, env=dict(os.environ), capture_output=True)
                    results[n].append(json.loads(result_file.read_text()))
                except subprocess.TimeoutExpired:
                    failed[n] = {"requested_events": n, "status": "DNF", "timeout_s": timeout}
                except subprocess.CalledProcessError as exc:
                    failed[n] = {"requested_events": n, "status": "error", "stderr": exc.stderr.decode(errors="replace")[-2000:]}
    finally:
        if tmp is not None:
            tmp.cleanup()
    rows = []
    for n in sizes:
        if n in failed:
            rows.append(failed[n])
            continue
        runs = results[n]
        row = dict(runs[0])
        row.update(
            requested_events=n,
            status="ok",
            wall_time_s=float(np.median([r["wall_time_s"] for r in runs])),
            wall_time_min_s=min(r["wall_time_s"] for r in runs),
            wall_times_s=[r["wall_time_s"] for r in runs],
            peak_rss_mb=max(r["peak_rss_mb"] for r in runs),
            avg_rss_mb=float(np.mean([r["avg_rss_mb"] for r in runs])),
        )
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok"]
    for a, b in zip(ok, ok[1:]):
        b["wall_ratio_vs_prev"] = b["wall_time_s"] / a["wall_time_s"] if a["wall_time_s"] > 0 else None
        b["peak_ratio_vs_prev"] = b["peak_rss_mb"] / a["peak_rss_mb"]
        b["event_ratio_vs_prev"] = b["events"] / a["events"]
    report = {
        "workload": "describe + code/count over the full history",
        "events_per_subject": events_per_subject,
        "subjects_per_shard": subjects_per_shard,
        "repeats": repeats,
        "backend": _backend(),
        "runs": rows,
    }
    if out is not None:
        atomic_write_json(out, report)
    return report


def _backend() -> str:
    from . import _accel

    return _accel.backend()


def format_table(report: dict) -> str:
    head = f"{'events':>9} {'subjects':>8} {'shards':>6} {'wall s':>8} {'peak MB':>8} {'avg MB':>8} {'nnz':>10} {'x wall':>7}"
    lines = [head, "-" * len(head)]
    for r in report["runs"]:
        if r["status"] != "ok":
            lines.append(f"{r['requested_events']:>9} {r['status']}")
            continue
        ratio = r.get("wall_ratio_vs_prev")
        lines.append(
            f"{r['events']:>9} {r['subjects']:>8} {r['shards']:>6} {r['wall_time_s']:>8.3f} "
            f"{r['peak_rss_mb']:>8.1f} {r['avg_rss_mb']:>8.1f} {r['nnz']:>10} {'' if ratio is None else f'{ratio:.2f}':>7}"
        )
    return "\n".join(lines)


if __name__ == "__main__":
    if len(sys.argv) == 5 and sys.argv[1] == "worker":
        result = worker(sys.argv[2], sys.argv[3])
        Path(sys.argv[4]).write_text(json.dumps(result))
    else:
        sys.exit("usage: python -m sparsetab.bench worker <dataset> <workdir> <result.json>")
