"""Command-line entry point.

Subcommands ``run-rover`` and ``run-quadcopter`` start from the canonical
presets, ``run-custom`` from a config file alone, and ``aggregate`` merges
summary files into one CSV of mean and standard-error series.  Flags override
the config file, which overrides the preset.
"""

import argparse
import csv
import json
import logging
import os
import sys

from .harness import METRICS, ExperimentConfig, MetricsSummary, quadcopter_config, rover_config, run_experiment

__all__ = ["main", "build_parser", "load_config_file", "parse_and_dispatch"]

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def load_config_file(path):
    """Key/value pairs from ``key = value`` text or from a summary JSON's config echo."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        data = json.loads(text)
        return dict(data.get("config", data))
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}: line {lineno}: expected 'key = value'")
        values[key.strip()] = val.strip()
    return values


def _existing_file(path):
    if not os.path.isfile(path):
        raise argparse.ArgumentTypeError(f"no such file: {path}")
    return path


def _seeds(text):
    try:
        if "," in text:
            return [int(x) for x in text.split(",") if x.strip()]
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if n < 1:
        raise argparse.ArgumentTypeError("seed count must be >= 1")
    return list(range(n))


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="multisafe", description="Multi-agent safe Q-learning experiments.")
    sub = p.add_subparsers(dest="command", metavar="{run-rover,run-quadcopter,run-custom,aggregate}")

    def run_flags(sp, config_required=False):
        sp.add_argument("--config", type=_existing_file, required=config_required,
                        help="key = value file or a summary.json to re-run")
        sp.add_argument("--seeds", type=_seeds, help="seed count N (seeds 0..N-1) or a comma list")
        sp.add_argument("--episodes", type=_positive_int)
        sp.add_argument("--steps", type=_positive_int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--mc-samples", type=_positive_int, dest="mc_samples")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--terrain", type=_existing_file, help="terrain grid file (rover)")
        sp.add_argument("--agents", help="comma-separated roster, e.g. multisafe,epsgreedy:0.1")
        sp.add_argument("-v", "--verbose", action="count", default=0)

    run_flags(sub.add_parser("run-rover", help="rover terrain experiment"))
    run_flags(sub.add_parser("run-quadcopter", help="two-quadcopter payload experiment"))
    run_flags(sub.add_parser("run-custom", help="experiment from a config file"), config_required=True)
    agg = sub.add_parser("aggregate", help="merge summary files into one CSV")
    agg.add_argument("summaries", nargs="+", type=_existing_file)
    agg.add_argument("--out", required=True, help="CSV path")
    agg.add_argument("-v", "--verbose", action="count", default=0)
    return p


def resolve_config(args):
    base = {"run-rover": rover_config, "run-quadcopter": quadcopter_config,
            "run-custom": ExperimentConfig}[args.command]()
    try:
        cfg = base
        if args.config:
            cfg = ExperimentConfig.from_mapping(load_config_file(args.config), base=base)
        flags = {k: getattr(args, k) for k in ("seeds", "episodes", "steps", "out", "mc_samples", "beta",
                                                "terrain", "agents") if getattr(args, k) is not None}
        return ExperimentConfig.from_mapping(flags, base=cfg)
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(str(exc)) from None


def aggregate(paths, out):
    """One row per (source, agent, metric, episode) with mean and standard error."""
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "agent_index", "agent", "metric", "episode", "mean", "se", "n_seeds"])
        for path in paths:
            s = MetricsSummary.read(path)
            for m in METRICS:
                mean, se = s.mean(m), s.se(m)
                for e in range(mean.shape[0]):
                    for i, label in enumerate(s.labels):
                        w.writerow([path, i, label, m, e, repr(float(mean[e, i])), repr(float(se[e, i])),
                                    len(s.seeds)])


def parse_and_dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        if args.command == "aggregate":
            aggregate(args.summaries, args.out)
            return EXIT_OK
        cfg = resolve_config(args)
    except UsageError as exc:
        print(f"multisafe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as exc:
        print(f"multisafe: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        summary = run_experiment(cfg)
    except (OSError, RuntimeError, ValueError, FloatingPointError, ArithmeticError) as exc:
        print(f"multisafe: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for i, label in enumerate(summary.labels):
        r = summary.mean("reward")[:, i]
        u = summary.mean("unsafe_events")[:, i]
        print(f"agent {i} {label}: mean episode reward {r.mean():.3f}, unsafe events/episode {u.mean():.3f}")
    if cfg.out:
        print(f"results written to {cfg.out}")
    return EXIT_OK


def main(argv=None):
    sys.exit(parse_and_dispatch(argv))


if __name__ == "__main__":
    main()
