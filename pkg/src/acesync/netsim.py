"""Deterministic discrete-event model of the cloud-edge links.

Each edge device owns one bandwidth/latency trace; both directions of its
link to the cloud use it. Transfers are store-and-forward with the trace
frozen at send time, and links do not share capacity.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Optional

import numpy as np

from .errors import ConfigurationError, EndOfSimulation, TraceParseError

CLOUD = "cloud"
BW_LIMITS = (5.0, 200.0)
LAT_LIMITS = (10.0, 300.0)
TRACE_HEADER = ("device_id", "t_s", "bandwidth_mbps", "latency_ms")


@dataclass(frozen=True)
class BandwidthTrace:
    device_id: int
    t_s: np.ndarray
    bandwidth_mbps: np.ndarray
    latency_ms: np.ndarray

    def __post_init__(self):
        t = self.t_s
        if t.size == 0 or t[0] != 0.0:
            raise ConfigurationError("trace must start with a sample at t = 0")
        if np.any(np.diff(t) <= 0):
            raise ConfigurationError("trace times must be strictly increasing")
        if not (t.shape == self.bandwidth_mbps.shape == self.latency_ms.shape):
            raise ConfigurationError("trace columns differ in length")

    def __len__(self):
        return int(self.t_s.size)

    def __eq__(self, other):
        if not isinstance(other, BandwidthTrace):
            return NotImplemented
        return (self.device_id == other.device_id
                and np.array_equal(self.t_s, other.t_s)
                and np.array_equal(self.bandwidth_mbps, other.bandwidth_mbps)
                and np.array_equal(self.latency_ms, other.latency_ms))


@dataclass(frozen=True)
class TraceSpec:
    duration_s: float = 120.0
    step_s: float = 0.5
    bw_range: tuple = BW_LIMITS
    lat_range: tuple = LAT_LIMITS
    jitter_sigma: float = 0.15
    reversion: float = 0.2


@dataclass(frozen=True)
class DeviceProfile:
    device_id: int
    compute_time_per_batch_s: float
    dataset_size: int
    reliability: float
    trace_id: int

    def __post_init__(self):
        if not self.compute_time_per_batch_s > 0:
            raise ConfigurationError("compute_time_per_batch_s must be positive")
        if self.dataset_size <= 0:
            raise ConfigurationError("dataset_size must be positive")
        if not 0.0 <= self.reliability <= 1.0:
            raise ConfigurationError("reliability must lie in [0, 1]")


class LinkSample(NamedTuple):
    bandwidth_mbps: float
    latency_ms: float


class Transfer(NamedTuple):
    src: Any
    dst: Any
    nbytes: int
    data: Any = None


@dataclass(order=True)
class NetEvent:
    time: float
    seq: int
    kind: str = field(compare=False)
    payload: Any = field(compare=False, default=None)


def _check_range(lo, hi, limits, what):
    if not (limits[0] <= lo <= hi <= limits[1]):
        raise ConfigurationError(f"{what} range ({lo}, {hi}) must lie within {limits}")


def gen_trace(spec: TraceSpec, seed: int, device_id: int = 0) -> BandwidthTrace:
    """Mean-reverting random walk, clamped to the ranges, one sample per step."""
    _check_range(*spec.bw_range, BW_LIMITS, "bandwidth")
    _check_range(*spec.lat_range, LAT_LIMITS, "latency")
    if not spec.step_s > 0 or not spec.duration_s > 0:
        raise ConfigurationError("duration_s and step_s must be positive")
    if spec.jitter_sigma < 0 or not 0.0 <= spec.reversion <= 1.0:
        raise ConfigurationError("jitter_sigma must be >= 0 and reversion in [0, 1]")
    n = max(1, math.ceil(spec.duration_s / spec.step_s))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, 2))
    out = np.empty((n, 2))
    lo = np.array([spec.bw_range[0], spec.lat_range[0]], dtype=np.float64)
    hi = np.array([spec.bw_range[1], spec.lat_range[1]], dtype=np.float64)
    mid = (lo + hi) / 2
    x = mid.copy()
    for i in range(n):
        if i:
            x = x + spec.reversion * (mid - x) + spec.jitter_sigma * (hi - lo) * noise[i]
            x = np.clip(x, lo, hi)
        out[i] = x
    t = np.arange(n) * spec.step_s
    return BandwidthTrace(device_id, t, out[:, 0].copy(), out[:, 1].copy())


def sample_bandwidth(trace: BandwidthTrace, t: float) -> LinkSample:
    """Step-function lookup: the latest sample at or before ``t``."""
    if t < 0:
        raise ConfigurationError("sample time must be non-negative")
    i = int(np.searchsorted(trace.t_s, t, side="right")) - 1
    return LinkSample(float(trace.bandwidth_mbps[i]), float(trace.latency_ms[i]))


def save_traces(traces, path) -> None:
    rows = sorted(traces, key=lambda tr: tr.device_id)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for tr in rows:
            for t, bw, lat in zip(tr.t_s, tr.bandwidth_mbps, tr.latency_ms):
                w.writerow([tr.device_id, repr(float(t)), repr(float(bw)), repr(float(lat))])


def save_trace(trace: BandwidthTrace, path) -> None:
    save_traces([trace], path)


def load_traces(path) -> dict:
    cols = defaultdict(list)
    order = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceParseError("empty trace file (missing t=0 sample)", line=1)
        if tuple(h.strip() for h in header) != TRACE_HEADER:
            raise TraceParseError(f"expected header {','.join(TRACE_HEADER)}", line=1)
        last = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise TraceParseError(f"expected 4 fields, got {len(row)}", line=lineno)
            try:
                dev = int(row[0])
                t, bw, lat = (float(x) for x in row[1:])
            except ValueError as exc:
                raise TraceParseError(f"malformed row: {exc}", line=lineno) from None
            if not all(math.isfinite(v) for v in (t, bw, lat)) or bw <= 0 or lat < 0:
                raise TraceParseError("bandwidth must be > 0, latency >= 0, all finite", line=lineno)
            if last is None or dev != last[0]:
                if last is not None and dev < last[0]:
                    raise TraceParseError(f"device {dev} out of order", line=lineno)
                if dev in cols:
                    raise TraceParseError(f"device {dev} rows are not contiguous", line=lineno)
                if t != 0.0:
                    raise TraceParseError(f"first sample of device {dev} must be at t=0", line=lineno)
                order.append(dev)
            elif t <= last[1]:
                raise TraceParseError(f"time {t} does not increase (previous {last[1]})", line=lineno)
            cols[dev].append((t, bw, lat))
            last = (dev, t)
    if not order:
        raise TraceParseError("empty trace file (missing t=0 sample)", line=2)
    out = {}
    for dev in order:
        arr = np.array(cols[dev], dtype=np.float64)
        out[dev] = BandwidthTrace(dev, arr[:, 0], arr[:, 1], arr[:, 2])
    return out


def load_trace(path, device_id: Optional[int] = None) -> BandwidthTrace:
    traces = load_traces(path)
    if device_id is None:
        if len(traces) != 1:
            raise TraceParseError(f"file holds {len(traces)} devices; pass device_id")
        return next(iter(traces.values()))
    if device_id not in traces:
        raise TraceParseError(f"device {device_id} not in {path}")
    return traces[device_id]


def transfer_delay(sample: LinkSample, nbytes: int) -> float:
    return sample.latency_ms / 1000.0 + nbytes * 8 / (sample.bandwidth_mbps * 1e6)


class NetworkSimulator:
    """Event queue, clock, and per-link byte counters.

    ``traces`` maps device id to its trace; the cloud endpoint is
    :data:`CLOUD`.
    """

    def __init__(self, traces: dict):
        self.traces = dict(traces)
        self.now = 0.0
        self._queue = []
        self._seq = 0
        self.bytes = defaultdict(int)
        self.scheduled = 0
        self.processed = 0
        self.log = []

    def _link(self, src, dst) -> BandwidthTrace:
        device = dst if src == CLOUD else src
        if src != CLOUD and dst != CLOUD:
            raise ConfigurationError("links only connect a device with the cloud")
        if device not in self.traces:
            raise ConfigurationError(f"unknown device {device!r}")
        return self.traces[device]

    def schedule(self, time: float, kind: str, payload=None) -> NetEvent:
        if time < self.now:
            raise ConfigurationError("cannot schedule an event in the past")
        ev = NetEvent(time, self._seq, kind, payload)
        self._seq += 1
        self.scheduled += 1
        heapq.heappush(self._queue, ev)
        return ev

    def transmit(self, src, dst, nbytes: int, t_now: float, data=None) -> NetEvent:
        if nbytes < 0:
            raise ConfigurationError("byte count must be non-negative")
        sample = sample_bandwidth(self._link(src, dst), t_now)
        self.bytes[(src, dst)] += int(nbytes)
        return self.schedule(t_now + transfer_delay(sample, nbytes), "transfer_complete",
                             Transfer(src, dst, int(nbytes), data))

    @property
    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> NetEvent:
        if not self._queue:
            raise EndOfSimulation("event queue is empty")
        ev = heapq.heappop(self._queue)
        self.now = max(self.now, ev.time)
        self.processed += 1
        nbytes = ev.payload.nbytes if isinstance(ev.payload, Transfer) else 0
        self.log.append((ev.time, ev.seq, ev.kind, nbytes))
        return ev

    def drain(self) -> list:
        out = []
        while self._queue:
            out.append(self.step())
        return out

    def uplink_bytes(self) -> int:
        return sum(v for (src, dst), v in self.bytes.items() if dst == CLOUD)

    def downlink_bytes(self) -> int:
        return sum(v for (src, dst), v in self.bytes.items() if src == CLOUD)

    def counters(self) -> list:
        """Rows of (src, dst, direction, bytes) sorted by link."""
        rows = []
        for (src, dst), v in self.bytes.items():
            rows.append((src, dst, "uplink" if dst == CLOUD else "downlink", v))
        return sorted(rows, key=lambda r: (r[2], str(r[0]), str(r[1])))
