"""Command-line entry point: ``cmppi run | batch | export | value-slice``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigurationError
from .harness import ALGORITHMS, ExperimentConfig, export_run, run_batch, run_episode, save_log, value_slice, _write_table

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _cmd_run(args) -> int:
    cfg = _config(args.config)
    if args.algorithm:
        cfg = cfg.replace(algorithm=args.algorithm)
        cfg.validate()
    result, episode_log = run_episode(cfg, args.seed, keep_log=True)
    if args.out:
        result.log_ref = str(save_log(episode_log, args.out))
    out = dict(result.record(), step_ms=round(result.step_ms, 3), log=result.log_ref)
    print(json.dumps(out))
    return EXIT_OK


def _cmd_batch(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    algorithms = args.algorithms.split(",") if args.algorithms else None
    if args.threads < 1:
        raise ConfigurationError("--threads must be >= 1")
    stats, _ = run_batch(cfg, args.runs, args.out_dir, args.threads, algorithms)
    print(json.dumps(dict(stats.counts(), mean_step_ms=round(stats.mean_step_ms, 3))))
    return EXIT_OK


def _cmd_export(args) -> int:
    for p in export_run(args.log, args.format, args.out_dir):
        print(p)
    return EXIT_OK


def _cmd_value_slice(args) -> int:
    cfg = _config(args.config)
    rows = value_slice(cfg, args.seed, args.deviation_min, args.deviation_max, args.deviation_steps)
    if args.out:
        _write_table(rows, Path(args.out), args.format)
    elif args.format == "json":
        print(json.dumps(rows, indent=2))
    else:
        print(",".join(rows[0]))
        for r in rows:
            print(",".join(repr(v) for v in r.values()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmppi", description="Clustered and dynamic-obstacle MPPI experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one closed-loop episode")
    p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="episode seed (overrides the config)")
    p.add_argument("--algorithm", choices=ALGORITHMS)
    p.add_argument("--out", help="write the episode log (JSON) here")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("batch", help="run episodes over consecutive seeds")
    p.add_argument("--config")
    p.add_argument("--runs", type=int, help="episodes per algorithm (overrides the config)")
    p.add_argument("--seed", type=int, help="first seed (overrides the config)")
    p.add_argument("--algorithms", help="comma-separated list, e.g. baseline,clustered")
    p.add_argument("--out-dir", help="directory for episodes.csv, summary.json, timing.json")
    p.add_argument("--threads", type=int, default=1, help="worker processes")
    p.set_defaults(func=_cmd_batch)

    p = sub.add_parser("export", help="export tables from an episode log")
    p.add_argument("--log", required=True)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out-dir", help="defaults to the log's directory")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("value-slice", help="cost/value over constant turning-rate deviations")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--deviation-min", type=float, default=-1.0)
    p.add_argument("--deviation-max", type=float, default=1.0)
    p.add_argument("--deviation-steps", type=int, default=41)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", help="write the table here instead of stdout")
    p.set_defaults(func=_cmd_value_slice)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
