"""Per-round metrics, convergence epochs, and the method comparison table."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List

from ..errors import ConfigurationError, InvariantViolation, IOFailure

GB = 10**9


@dataclass(frozen=True)
class MetricsRow:
    round: int
    epoch: int
    uplink_bytes: int
    downlink_bytes: int
    train_loss: float
    val_accuracy: float
    mean_divergence: float
    max_divergence: float
    sync_interval: int
    mean_compression_c: float
    sim_time_s: float


FIELDS = tuple(f.name for f in fields(MetricsRow))
CSV_HEADER = ",".join(FIELDS)
_INT_FIELDS = {"round", "epoch", "uplink_bytes", "downlink_bytes", "sync_interval"}


@dataclass
class MetricsLog:
    rows: List[MetricsRow] = field(default_factory=list)
    method: str = ""
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def append(self, row: MetricsRow) -> None:
        if self.rows and row.round <= self.rows[-1].round:
            raise InvariantViolation("metrics rounds must strictly increase")
        if row.uplink_bytes < 0 or row.downlink_bytes < 0:
            raise InvariantViolation("byte counts must be non-negative")
        if not math.isfinite(row.train_loss):
            raise InvariantViolation(f"non-finite training loss in round {row.round}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, MetricsLog) and self.rows == other.rows

    @property
    def total_uplink(self) -> int:
        return sum(r.uplink_bytes for r in self.rows)

    @property
    def total_downlink(self) -> int:
        return sum(r.downlink_bytes for r in self.rows)

    def epoch_accuracy(self) -> list:
        """(epoch, accuracy at the last round of that epoch), ascending."""
        last = {}
        for r in self.rows:
            last[r.epoch] = r.val_accuracy
        return sorted(last.items())


def convergence_epoch(log: MetricsLog, final_acc=None) -> int:
    """First epoch whose accuracy reaches 99% of the final accuracy."""
    per_epoch = log.epoch_accuracy() if isinstance(log, MetricsLog) else list(enumerate(log, start=1))
    if not per_epoch:
        raise ConfigurationError("convergence epoch of an empty log is undefined")
    if final_acc is None:
        final_acc = per_epoch[-1][1]
    for epoch, acc in per_epoch:
        if acc >= 0.99 * final_acc:
            return epoch
    return per_epoch[-1][0]


def _fmt(value):
    return repr(value) if isinstance(value, float) else str(value)


def write_csv(log: MetricsLog, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in log.rows:
            fh.write(",".join(_fmt(getattr(r, f)) for f in FIELDS) + "\n")


def _parse_row(raw: dict) -> MetricsRow:
    return MetricsRow(**{k: int(raw[k]) if k in _INT_FIELDS else float(raw[k]) for k in FIELDS})


def read_csv(path) -> MetricsLog:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise ConfigurationError(f"{path}: header does not match {CSV_HEADER}")
        log = MetricsLog()
        for raw in reader:
            log.append(_parse_row(raw))
    return log


def write_json(log: MetricsLog, path) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in log.rows], indent=1))


def read_json(path) -> MetricsLog:
    log = MetricsLog()
    for raw in json.loads(Path(path).read_text()):
        if set(raw) != set(FIELDS):
            raise ConfigurationError(f"{path}: row keys do not match the metrics schema")
        log.append(_parse_row(raw))
    return log


@dataclass(frozen=True)
class ComparisonRow:
    method: str
    final_accuracy: float
    uplink_gb: float
    convergence_epoch: float
    final_loss: float
    seeds: tuple = ()


REPORT_FIELDS = ("method", "final_accuracy", "uplink_gb", "convergence_epoch", "final_loss")


@dataclass
class ComparisonReport:
    rows: List[ComparisonRow]
    logs: dict = field(default_factory=dict)  # (method, seed) -> MetricsLog

    def row(self, method: str) -> ComparisonRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def table(self) -> str:
        head = f"{'method':<18}{'top-1 acc (%)':>14}{'final loss':>12}{'uplink (GB)':>14}{'conv. epoch':>13}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.method:<18}{100 * r.final_accuracy:>14.2f}{r.final_loss:>12.4f}"
                         f"{r.uplink_gb:>14.6f}{r.convergence_epoch:>13.2f}")
        return "\n".join(lines)


def summarize(method: str, logs) -> ComparisonRow:
    logs = list(logs)
    if not logs or any(len(log) == 0 for log in logs):
        raise ConfigurationError(f"no rounds recorded for {method}")
    n = len(logs)
    return ComparisonRow(
        method,
        sum(log.rows[-1].val_accuracy for log in logs) / n,
        sum(log.total_uplink for log in logs) / n / GB,
        sum(convergence_epoch(log) for log in logs) / n,
        sum(log.rows[-1].train_loss for log in logs) / n,
        tuple(log.seed for log in logs),
    )


def write_report_csv(report: ComparisonReport, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(REPORT_FIELDS) + "\n")
        for r in report.rows:
            fh.write(",".join(_fmt(getattr(r, f)) for f in REPORT_FIELDS) + "\n")


def write_report_json(report: ComparisonReport, path) -> None:
    rows = [{f: getattr(r, f) for f in REPORT_FIELDS} | {"seeds": list(r.seeds)} for r in report.rows]
    Path(path).write_text(json.dumps(rows, indent=1))


def read_report_csv(path) -> ComparisonReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [ComparisonRow(raw["method"], *(float(raw[f]) for f in REPORT_FIELDS[1:])) for raw in reader]
    return ComparisonReport(rows)


def emit(obj, fmt: str, path) -> Path:
    """Write a MetricsLog or ComparisonReport as csv or json."""
    path = Path(path)
    writers = {
        (MetricsLog, "csv"): write_csv,
        (MetricsLog, "json"): write_json,
        (ComparisonReport, "csv"): write_report_csv,
        (ComparisonReport, "json"): write_report_json,
    }
    writer = writers.get((type(obj), fmt))
    if writer is None:
        raise ConfigurationError(f"cannot emit {type(obj).__name__} as {fmt!r}")
    try:
        writer(obj, path)
    except OSError as exc:
        raise IOFailure(str(exc)) from exc
    return path
