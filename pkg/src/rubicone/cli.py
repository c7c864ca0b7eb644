"""Command-line entry point: ``rubicone {sim,sweep,reproduce,analyze}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from rubicone.analytics import RobustnessParams, empirical_reliability, robustness
from rubicone.config import ConfigError, load_config
from rubicone.experiments import (
    POINT_COLUMNS,
    emit_results,
    load_sweep,
    read_results,
    records_from_rows,
    reproduce_figure,
    run_experiment,
    run_point,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("rubicone")


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rubicone", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run trials of one scenario")
    sim.add_argument("--config", required=True, help="scenario JSON file")
    sim.add_argument("--seed", type=_u64, help="base seed (default: the config's)")
    sim.add_argument("--trials", type=_positive, help="trial count (default: the config's)")
    sim.add_argument("--out", required=True, help="per-trial result file")
    sim.add_argument("--format", choices=("csv", "json"), default="csv")
    sim.add_argument("--trace", help="write the full event trace here")

    sweep = sub.add_parser("sweep", help="run a parameter sweep")
    sweep.add_argument("--spec", required=True, help="sweep JSON file")
    sweep.add_argument("--out-dir", required=True)
    sweep.add_argument("--parallel", type=_positive, help="worker processes")
    sweep.add_argument("--format", choices=("csv", "json"), default="csv")

    rep = sub.add_parser("reproduce", help="run a built-in figure experiment")
    rep.add_argument("--figure", type=int, choices=(3, 4, 5, 6), required=True)
    rep.add_argument("--out-dir", required=True)
    rep.add_argument("--trials", type=_positive, default=2000)
    rep.add_argument("--seed", type=_u64, default=2024)
    rep.add_argument("--parallel", type=_positive)

    ana = sub.add_parser("analyze", help="robustness of one result set against a baseline")
    ana.add_argument("--in", dest="input", required=True, help="per-trial results (csv or json)")
    ana.add_argument("--baseline", required=True, help="per-trial baseline results")
    ana.add_argument("--kappa", type=float, default=1.0)
    return parser


def _cmd_sim(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.trials is not None:
        cfg = replace(cfg, trials=args.trials)
    records = run_point(cfg, 0, cfg.seed, trace_path=args.trace)
    emit_results(records, args.format, args.out)
    est = empirical_reliability([r for r in records if not r.local_check_failed] or records)
    log.info("%d trials, reliability %.4f +/- %.4f", len(records), est.estimate, est.ci_halfwidth)


def _cmd_sweep(args) -> None:
    spec = load_sweep(args.spec)
    result = run_experiment(spec, args.parallel)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = args.format
    rows = [rec for _, rec in result.records]
    emit_results(rows, ext, out / f"trials.{ext}")
    emit_results(result.points, ext, out / f"points.{ext}", POINT_COLUMNS)
    log.info("%d points, %d trials written to %s", len(result.points), len(rows), out)


def _reliability_by_group(rows) -> dict:
    groups: dict = {}
    for r in records_from_rows(rows):
        if not r.local_check_failed:
            groups.setdefault((r.n_nodes, r.p_node), []).append(r)
    return {k: empirical_reliability(v).estimate for k, v in groups.items()}


def _cmd_analyze(args) -> None:
    params = RobustnessParams(kappa=args.kappa)
    current = _reliability_by_group(read_results(args.input))
    baseline = _reliability_by_group(read_results(args.baseline))
    shared = sorted(set(current) & set(baseline))
    if not shared:
        raise ConfigError("no (n_nodes, p_node) group appears in both result files")
    writer = sys.stdout
    writer.write("n_nodes,p_node,reliability,baseline,kappa,robustness\n")
    for key in shared:
        value = robustness(current[key], baseline[key], params)
        writer.write(f"{key[0]},{key[1]:.6f},{current[key]:.6f},{baseline[key]:.6f},{args.kappa},{value:.6f}\n")


COMMANDS = {
    "sim": _cmd_sim,
    "sweep": _cmd_sweep,
    "reproduce": lambda a: reproduce_figure(a.figure, a.out_dir, trials=a.trials, seed=a.seed, parallel=a.parallel),
    "analyze": _cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
