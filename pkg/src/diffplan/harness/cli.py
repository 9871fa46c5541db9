"""Command-line entry point: ``diffplan <subcommand> ...``.

Failures print a single JSON line ``{"error": ..., "message": ...}`` on
stderr and exit nonzero (2 for bad configuration, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..dataset import export_csv, save_dataset
from .config import ConfigError, RunConfig
from .dv import Bundle, build_dataset, run_train
from .runner import ResultsCSV, dump_attention, format_summary, parse_axis, run_eval, run_sweep, summarize

log = logging.getLogger("diffplan")


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if args.config else RunConfig()


def _ints(text: str | None):
    return None if text is None else [int(v) for v in text.split(",") if v.strip()]


def cmd_gen_data(args) -> dict:
    cfg = _config(args)
    ds = build_dataset(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    if args.csv:
        export_csv(ds, out.with_suffix(".csv"))
    return {"dataset": str(out), "episodes": len(ds.episodes), "steps": ds.n_steps}


def cmd_train(args) -> dict:
    cfg = _config(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.config_hash()}-s{seed}"
    b = run_train(cfg, seed, out, cache_dir=args.cache, log=log.info)
    return {"bundle": b.path, "config_hash": cfg.config_hash(), "seed": seed,
            "train_seconds": round(b.traces["train_seconds"], 2)}


def cmd_eval(args) -> dict:
    b = Bundle.load(args.bundle)
    row = run_eval(b, args.episodes, ResultsCSV(args.results) if args.results else None, args.replan_every)
    return {k: getattr(row, k) for k in ("config_hash", "seed", "mean_return", "normalized_score", "success_rate")}


def cmd_sweep(args) -> dict:
    cfg = _config(args)
    if not args.axis:
        raise ConfigError("sweep needs at least one --axis name=v1,v2,...")
    axes = dict(parse_axis(a) for a in args.axis)
    seeds = _ints(args.seeds) or list(cfg.seeds)
    out = Path(args.out or "runs")
    results = ResultsCSV(args.results or out / "results.csv")
    rows = run_sweep(cfg, axes, out, seeds, results, args.workers, args.cache)
    for name in axes:
        print(format_summary(summarize(rows, name), name))
    return {"rows": len(rows), "results": str(results.path)}


def cmd_dump_attention(args) -> dict:
    b = Bundle.load(args.bundle)
    out = Path(args.out or Path(args.bundle) / "attention")
    d = dump_attention(b, out, _ints(args.steps), _ints(args.layers), seed=args.seed or 0)
    return {"out": str(out), "steps": d.steps, "layers": d.layers}


def cmd_summarize(args) -> dict:
    rows = ResultsCSV(args.results).read()
    cells = summarize(rows, args.axis, args.metric)
    print(format_summary(cells, args.axis, args.metric))
    return {"rows": len(rows)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffplan", description="Diffusion planning experiments on built-in environments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the offline dataset a config describes")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True, help="dataset file (.dpds)")
    sp.add_argument("--csv", action="store_true", help="also write a CSV export next to it")

    sp = add("train", cmd_train, "train a planner bundle for one seed")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="bundle directory")
    sp.add_argument("--cache", help="dataset cache directory")

    sp = add("eval", cmd_eval, "evaluate a bundle and append a result row")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--results", help="results CSV to append to")
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--replan-every", type=int)

    sp = add("sweep", cmd_sweep, "train and evaluate the cross product of one or more axes")
    sp.add_argument("--config")
    sp.add_argument("--axis", action="append", help="name=v1,v2,... (repeatable)")
    sp.add_argument("--seeds", help="comma-separated seeds (default: the config's)")
    sp.add_argument("--out", help="root directory for bundles")
    sp.add_argument("--results", help="results CSV (default OUT/results.csv)")
    sp.add_argument("--workers", type=int, help="worker processes (default $DV_WORKERS or 1)")
    sp.add_argument("--cache", help="dataset cache directory")

    sp = add("dump-attention", cmd_dump_attention, "write DiT attention maps during DDIM sampling")
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--out")
    sp.add_argument("--steps", help="comma-separated DDIM step indices (default all)")
    sp.add_argument("--layers", help="comma-separated layer indices (default 0)")
    sp.add_argument("--seed", type=int)

    sp = add("summarize", cmd_summarize, "mean ± standard error per value of a sweep axis")
    sp.add_argument("--results", required=True)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--metric", default="normalized_score")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        info = args.fn(args)
    except ConfigError as e:
        print(json.dumps({"error": "config", "message": str(e)}), file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1
    print(json.dumps(info))
    return 0


if __name__ == "__main__":
    sys.exit(main())
