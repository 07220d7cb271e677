"""Command-line entry point: ``acesync run|compare|trace gen|report``."""

from __future__ import annotations

import argparse
import csv
import re
import sys
from pathlib import Path

from .errors import (AceSyncError, ConfigurationError, InvariantViolation, IOFailure,
                     TraceParseError)
from .harness.compare import compare
from .harness.config import METHODS, DeviceConfig, ExperimentConfig, load_config
from .harness.metrics import (REPORT_FIELDS, ComparisonReport, emit, read_csv, read_report_csv,
                              summarize)
from .harness.runner import make_fleet, run_experiment
from .netsim import save_traces

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    log = run_experiment(cfg)
    path = emit(log, "csv", _out_dir(args.out) / f"metrics_{cfg.method}_{cfg.seed}.csv")
    print(f"{cfg.method} seed {cfg.seed}: {len(log)} rounds, uplink {log.total_uplink} B, "
          f"final accuracy {log.rows[-1].val_accuracy:.4f}" if len(log) else f"{cfg.method}: 0 rounds")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigurationError(f"unknown method(s): {', '.join(bad)}")
    report = compare([cfg.replace(method=m) for m in methods], args.seeds)
    out = _out_dir(args.out)
    for (method, seed), log in sorted(report.logs.items()):
        emit(log, "csv", out / f"metrics_{method}_{seed}.csv")
    emit(report, "csv", out / "comparison.csv")
    emit(report, "json", out / "comparison.json")
    print(report.table())
    return EXIT_OK


def cmd_trace_gen(args) -> int:
    cfg = ExperimentConfig(devices=DeviceConfig(K=args.devices, trace_duration_s=args.duration),
                           seed=args.seed)
    _, traces = make_fleet(cfg)
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    try:
        save_traces(traces.values(), out)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    print(f"wrote {len(traces)} traces to {out}")
    return EXIT_OK


_METRICS_NAME = re.compile(r"metrics_(?P<method>.+)_(?P<seed>\d+)\.csv$")


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        try:
            with open(path, newline="") as fh:
                header = next(csv.reader(fh), [])
        except OSError as exc:
            raise IOFailure(str(exc)) from exc
        if tuple(header) == REPORT_FIELDS:
            rows.extend(read_report_csv(path).rows)
            continue
        log = read_csv(path)
        m = _METRICS_NAME.search(Path(path).name)
        log.method = m["method"] if m else Path(path).stem
        log.seed = int(m["seed"]) if m else 0
        rows.append(summarize(log.method, [log]))
    print(ComparisonReport(rows).table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acesync", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one method for one seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several methods over a seed list")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", required=True, help="comma-separated, e.g. fullsync,acesync")
    p.add_argument("--seeds", type=_int_list, required=True, help="comma-separated, e.g. 1,2,3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("trace", help="bandwidth trace utilities")
    tsub = p.add_subparsers(dest="trace_command", required=True)
    g = tsub.add_parser("gen", help="generate per-device traces as CSV")
    g.add_argument("--devices", type=int, required=True)
    g.add_argument("--duration", type=float, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_trace_gen)

    p = sub.add_parser("report", help="print a summary table from metrics or comparison CSVs")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, TraceParseError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IOFailure, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (InvariantViolation, AceSyncError) as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
