"""numba vs numpy backends on the hot kernels.

    python benchmarks/bench_kernels.py [--subjects 500] [--repeats 3] [--json out.json]

Each kernel runs once per backend to warm up (JIT compile), then ``repeats``
timed runs; the best time is reported. Outputs are compared so a speedup
never hides a wrong answer.
"""

import argparse
import json
import time

import numpy as np

from sparsetab import _accel
from sparsetab.event_store import summarize_codes
from sparsetab.learner import GbdtParams, SgdParams, TaskData, fit_bins, fit_gbdt, fit_sgd_logistic
from sparsetab.learner.binning import bin_entries
from sparsetab.synthetic import SynthSpec, generate_events
from sparsetab.tabularizer import AGGS, TabConfig, build_feature_schema, rolling_start_indices, tabularize_shard


def best_of(fn, repeats):
    fn()  # warm-up / compile
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(subjects):
    events, _ = generate_events(SynthSpec(subjects, n_codes=30, events_per_subject=60, seed=1))
    shard = events.sorted()
    schema = build_feature_schema(summarize_codes([shard]), TabConfig(windows=("1d", "7d", "30d", "full"), aggs=AGGS))
    times = np.sort(np.random.default_rng(0).integers(0, 10**12, 200_000))

    X = tabularize_shard(shard, schema)
    y = np.random.default_rng(1).integers(0, 2, X.n_rows)
    data = TaskData.from_memory([(X, y)])
    table = fit_bins([(X, None)], max_bins=32)

    return {
        "rolling_starts (200k times, 7d)": lambda: rolling_start_indices(times, "7d"),
        f"tabularize_shard ({len(shard.subject_id)} events)": lambda: tabularize_shard(shard, schema).content_bytes(),
        f"bin_entries ({X.nnz} nnz)": lambda: bin_entries(X, table),
        "fit_gbdt (20 trees, depth 6)": lambda: fit_gbdt(data, GbdtParams(n_trees=20, max_depth=6)).to_json(),
        "fit_sgd (3 epochs)": lambda: fit_sgd_logistic(data, SgdParams(epochs=3)).to_json(),
    }


def same(a, b):
    return np.array_equal(a, b) if isinstance(a, np.ndarray) else a == b


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--subjects", type=int, default=500)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--json", default=None)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = []
    for name, fn in cases(args.subjects).items():
        res = {}
        for backend in ("numba", "numpy"):
            with _accel.use_backend(backend):
                res[backend] = best_of(fn, args.repeats)
        rows.append(
            {
                "kernel": name,
                "numba_s": res["numba"][0],
                "numpy_s": res["numpy"][0],
                "speedup": res["numpy"][0] / res["numba"][0],
                "outputs_match": bool(same(res["numba"][1], res["numpy"][1])),
            }
        )

    w = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{w}} {'numba s':>9} {'numpy s':>9} {'speedup':>8}  match")
    for r in rows:
        print(f"{r['kernel']:<{w}} {r['numba_s']:>9.4f} {r['numpy_s']:>9.4f} {r['speedup']:>7.1f}x  {r['outputs_match']}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"subjects": args.subjects, "repeats": args.repeats, "rows": rows}, f, indent=2)


if __name__ == "__main__":
    main()
