"""``sparsetab`` command line.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import Config, as_list, parse_overrides
from .errors import SparsetabError
from .pipeline import JsonLinesFormatter, emit, peak_rss_mb, run_pipeline, run_stage


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def _common(p: argparse.ArgumentParser, with_dir: bool = True) -> None:
    if with_dir:
        p.add_argument("dir", nargs="?", help="dataset directory (default: data_root or $SPARSETAB_DATA_ROOT)")
    p.add_argument("--config", help="JSON or YAML config with dotted keys")
    p.add_argument("overrides", nargs="*", help="key=value config overrides")


def _tab_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--windows", help="comma list, e.g. 1d,7d,30d,full")
    p.add_argument("--aggs", help="comma list, e.g. code/count,value/sum")
    p.add_argument("--min-code-count", type=int)
    p.add_argument("--max-included-codes", type=int)
    p.add_argument("--allowed-codes", help="comma list of codes")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsetab", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted-signal labels")
    p.add_argument("out")
    p.add_argument("--subjects", type=int, default=1000)
    p.add_argument("--codes", type=int, default=20)
    p.add_argument("--events-per-subject", type=int, default=60)
    p.add_argument("--rule", default="count(SIG,7d)>=3")
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--shards", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="shard long-form event files into a dataset")
    p.add_argument("out")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--shards", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("describe", help="per-code counts and kinds")
    _common(p)
    for name in ("tabularize-static", "tabularize-time-series"):
        p = sub.add_parser(name, help=f"{name.split('-', 1)[1].replace('-', ' ')} features")
        _common(p)
        _tab_flags(p)

    p = sub.add_parser("cache-task", help="align labels and cache task shards")
    _common(p)
    _tab_flags(p)
    p.add_argument("--task")
    p.add_argument("--labels")
    p.add_argument("--at-or-before", action="store_true", help="allow events at the prediction time")

    for name in ("model", "pipeline"):
        p = sub.add_parser(name, help="train and evaluate" if name == "model" else "run all five stages")
        _common(p)
        _tab_flags(p)
        p.add_argument("--task")
        p.add_argument("--labels")
        p.add_argument("--at-or-before", action="store_true")
        p.add_argument("--learner", choices=("gbdt", "sgd"))
        p.add_argument("--in-memory", type=_bool, help="true keeps shards in memory; false streams them from disk")
        p.add_argument("--sweep", action="store_true")
        p.add_argument("--budget", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)

    p = sub.add_parser("bench", help="scaling benchmark: code/count over the full history")
    p.add_argument("--sizes", default="25000,50000,100000", help="total events per run")
    p.add_argument("--events-per-subject", type=int, default=50)
    p.add_argument("--subjects-per-shard", type=int, default=100)
    p.add_argument("--timeout", type=float, default=600.0)
    p.add_argument("--workdir", default=None)
    p.add_argument("--out", default="bench_report.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5, help="interleaved timing rounds per size; the median is reported")
    return ap


def _config(args) -> tuple[Config, Path | None]:
    overrides = list(getattr(args, "overrides", []) or [])
    d = getattr(args, "dir", None)
    if d is not None and "=" in d:
        overrides.insert(0, d)
        d = None
    flags = {}
    mapping = {
        "windows": "tabularization.windows",
        "aggs": "tabularization.aggs",
        "min_code_count": "tabularization.min_code_inclusion_count",
        "max_included_codes": "tabularization.max_included_codes",
        "allowed_codes": "tabularization.allowed_codes",
        "task": "task.name",
        "labels": "task.labels",
        "learner": "model.learner",
        "budget": "model.budget",
        "seed": "model.seed",
        "jobs": "model.jobs",
        "in_memory": "model_params.iterator.keep_data_in_memory",
    }
    for attr, key in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            flags[key] = as_list(v) if attr in ("windows", "aggs", "allowed_codes") else v
    if getattr(args, "at_or_before", False):
        flags["task.at_or_before"] = True
    if getattr(args, "sweep", False):
        flags["model.sweep"] = True
    merged = parse_overrides(overrides)
    merged.update(flags)
    cfg = Config.build(getattr(args, "config", None), merged)
    root = cfg.data_root(d) if hasattr(args, "dir") else None
    return cfg, root


def _report(outcome) -> None:
    status = "cached" if outcome.cached else "built"
    extra = " ".join(f"{k}={v}" for k, v in outcome.summary.items())
    print(f"{outcome.stage}: {status} {extra}".rstrip())


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # key=value overrides may follow flags; argparse only collects them before
    stray = [x for x in extra if "=" not in x or x.startswith("-")]
    if stray or (extra and not hasattr(args, "overrides")):
        parser.error(f"unrecognized arguments: {' '.join(stray or extra)}")
    if extra:
        args.overrides = list(args.overrides or []) + extra
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLinesFormatter())
    root_logger = logging.getLogger("sparsetab")
    root_logger.handlers[:] = [handler]
    root_logger.setLevel(logging.WARNING if args.quiet else logging.INFO)
    root_logger.propagate = False

    t0 = time.perf_counter()
    try:
        code = _dispatch(args)
    except SparsetabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    emit("command", command=args.command, wall_time_s=round(time.perf_counter() - t0, 4), peak_rss_mb=round(peak_rss_mb(), 1))
    return code


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "synth":
        from .synthetic import PlantedRule, SynthSpec, generate_synthetic

        spec = SynthSpec(
            args.subjects,
            args.codes,
            args.events_per_subject,
            PlantedRule.parse(args.rule, args.noise),
            args.seed,
        )
        ds, labels = generate_synthetic(spec, args.out, args.shards)
        print(f"synth: wrote {ds.manifest.n_events} events for {ds.manifest.n_subjects} subjects; labels at {labels}")
        return 0
    if cmd == "ingest":
        from .event_store import ingest

        ds = ingest(args.input, args.out, args.shards, args.seed)
        print(f"ingest: {ds.manifest.n_events} events, {ds.manifest.n_subjects} subjects, {len(ds)} shards")
        return 0
    if cmd == "bench":
        from .bench import format_table, run_bench

        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
        report = run_bench(
            sizes,
            out=args.out,
            timeout=args.timeout,
            events_per_subject=args.events_per_subject,
            subjects_per_shard=args.subjects_per_shard,
            workdir=args.workdir,
            seed=args.seed,
            repeats=args.repeats,
        )
        print(format_table(report))
        return 0
    cfg, root = _config(args)
    if cmd == "pipeline":
        outcomes = run_pipeline(cfg, root)
        for o in outcomes:
            _report(o)
        rebuilt = [o.stage for o in outcomes if not o.cached]
        print(f"pipeline: {len(rebuilt)} stage(s) rebuilt" + (f" ({', '.join(rebuilt)})" if rebuilt else ""))
        return 0
    outcome = run_stage(cmd, cfg, root)
    _report(outcome)
    if cmd == "model":
        report = root / "models" / cfg["task.name"] / "final_report.json"
        print(json.dumps(json.loads(report.read_text()), indent=2, sort_keys=True))
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
