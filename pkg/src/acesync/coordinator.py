"""Cloud side: device weighting, reconstruction, aggregation, drift control."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .compression import CompressionSchedule
from .errors import ConfigurationError, ProtocolError, ShapeError
from .netsim import CLOUD, DeviceProfile, NetworkSimulator
from .tensor import BlockIndex, ModelParams
from .wire import CLOUD_SENDER, model_payload


def device_weights(profiles: Sequence[DeviceProfile], use_reliability: bool = True) -> np.ndarray:
    """Normalized dataset-size x reliability weights, ordered by device id."""
    if not profiles:
        raise ConfigurationError("need at least one device")
    profiles = sorted(profiles, key=lambda p: p.device_id)
    raw = np.array([p.dataset_size * (p.reliability if use_reliability else 1.0) for p in profiles],
                   dtype=np.float64)
    total = raw.sum()
    if total <= 0:
        raise ConfigurationError("all device weights are zero")
    return raw / total


class GradientCache:
    """Last received values per (device, block), replayed with decay ``lam``."""

    def __init__(self, lam: float = 0.0):
        if not 0.0 <= lam <= 1.0:
            raise ConfigurationError("cache decay lambda must lie in [0, 1]")
        self.lam = lam
        self.entries = {}

    def get(self, device, block_id):
        return self.entries.get((device, block_id))

    def put(self, device, block_id, values, round_):
        self.entries[(device, block_id)] = (np.array(values, dtype=np.float64), round_)


def reconstruct_update(received: dict, cache: GradientCache, index: BlockIndex,
                       round_: int = 0) -> dict:
    """Full-length per-device updates from block payloads.

    ``received`` maps device id to a :class:`~acesync.wire.BlockPayload`.
    Missing blocks are filled with ``lam`` times the cached value, or zeros.
    """
    out = {}
    n_blocks = len(index)
    for dev in sorted(received):
        payload = received[dev]
        g = np.zeros(index.num_params)
        got = set()
        for bid, values in payload.blocks():
            if not 0 <= bid < n_blocks:
                raise ProtocolError(f"device {dev} sent unknown block {bid}")
            sl = index.slice(bid)
            if len(values) != sl.stop - sl.start:
                raise ProtocolError(f"block {bid} from device {dev} has the wrong length")
            g[sl] = values
            cache.put(dev, bid, values, round_)
            got.add(bid)
        if cache.lam > 0:
            for bid in range(n_blocks):
                if bid not in got:
                    hit = cache.get(dev, bid)
                    if hit is not None:
                        g[index.slice(bid)] = cache.lam * hit[0]
        out[dev] = g
    return out


def aggregate(updates: dict, weights) -> np.ndarray:
    """Weighted sum over devices in ascending id order.

    ``weights[k]`` belongs to the k-th smallest device id.
    """
    devs = sorted(updates)
    weights = np.asarray(weights, dtype=np.float64)
    if len(devs) != weights.size:
        raise ShapeError("one weight per device required")
    n = updates[devs[0]].shape
    total = np.zeros(n)
    for w, dev in zip(weights, devs):
        if updates[dev].shape != n:
            raise ShapeError("device updates differ in length")
        total += w * updates[dev]
    return total


def compute_divergence(theta_k, theta) -> float:
    a = theta_k.values if isinstance(theta_k, ModelParams) else np.asarray(theta_k)
    b = theta.values if isinstance(theta, ModelParams) else np.asarray(theta)
    if a.shape != b.shape:
        raise ShapeError("parameter vectors differ in length")
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class DivergenceReport:
    divergences: tuple
    tau: float
    sync_interval: int
    i_min: int = 1
    i_max: int = 8

    def __post_init__(self):
        if not 1 <= self.i_min <= self.sync_interval <= self.i_max:
            raise ConfigurationError("need 1 <= I_min <= sync_interval <= I_max")
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")


def adjust_sync_interval(report: DivergenceReport) -> DivergenceReport:
    """Halve the interval on a threshold violation, else grow it by one."""
    if report.divergences and max(report.divergences) > report.tau:
        interval = max(report.i_min, report.sync_interval // 2)
    else:
        interval = min(report.i_max, report.sync_interval + 1)
    return replace(report, sync_interval=interval)


class SyncController:
    """Owns the sync interval and the divergence threshold.

    With ``tau=None`` the threshold is half the median divergence seen over
    the first ``warmup`` control steps, frozen afterwards; the interval is
    not adjusted until then.
    """

    def __init__(self, tau: Optional[float] = None, i_min: int = 1, i_max: int = 8,
                 initial: Optional[int] = None, warmup: int = 5):
        if not 1 <= i_min <= i_max:
            raise ConfigurationError("need 1 <= I_min <= I_max")
        self.tau = tau
        self.i_min = i_min
        self.i_max = i_max
        self.interval = i_min if initial is None else initial
        self.warmup = warmup
        self._history = []
        self.steps = 0

    def control_step(self, divergences) -> int:
        divergences = tuple(float(d) for d in divergences)
        self.steps += 1
        if self.tau is None:
            self._history.extend(divergences)
            if self.steps < self.warmup:
                return self.interval
            med = float(np.median(self._history))
            self.tau = 0.5 * med if med > 0 else np.finfo(float).tiny
            if self.steps == self.warmup:
                return self.interval
        report = DivergenceReport(divergences, self.tau, self.interval, self.i_min, self.i_max)
        self.interval = adjust_sync_interval(report).sync_interval
        return self.interval


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple
    k: int
    schedules: dict

    def schedule_for(self, device_id: int) -> CompressionSchedule:
        return self.schedules[self.labels[device_id]]


def _profile_features(profiles, mean_bandwidth) -> np.ndarray:
    x = np.array([[mean_bandwidth[p.device_id], p.compute_time_per_batch_s, p.dataset_size]
                  for p in profiles], dtype=np.float64)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - x.mean(axis=0)) / std


def kmeans(x: np.ndarray, k: int, seed: int, iters: int = 50) -> np.ndarray:
    """Lloyd iterations from a seeded farthest-point start."""
    rng = np.random.default_rng(seed)
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    while len(centers) < k:
        d = np.min([((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
        centers.append(x[int(np.argmax(d))])
    centers = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(iters):
        d = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = d.argmin(axis=1)
        for c in range(k):
            if not np.any(new == c):
                # reseed an empty cluster at the worst-fitting point
                far = int(np.argmax(d[np.arange(n), new]))
                new[far] = c
                d[far] = np.inf
                d[far, c] = 0.0
        if np.array_equal(new, labels):
            break
        labels = new
        centers = np.array([x[labels == c].mean(axis=0) for c in range(k)])
    return labels


def cluster_devices(profiles: Sequence[DeviceProfile], k: int, seed: int,
                    mean_bandwidth: dict,
                    base: Optional[CompressionSchedule] = None) -> ClusterAssignment:
    """Group devices by (mean bandwidth, compute time, dataset size).

    Each cluster gets a copy of ``base`` whose ``beta`` is rescaled by
    fleet-mean over cluster-mean bandwidth, so a cluster's schedule is
    centred on its own typical link.
    """
    profiles = sorted(profiles, key=lambda p: p.device_id)
    K = len(profiles)
    if not 1 <= k <= K:
        raise ConfigurationError(f"cluster count {k} must lie in [1, {K}]")
    base = base or CompressionSchedule()
    labels = kmeans(_profile_features(profiles, mean_bandwidth), k, seed)
    bw = np.array([mean_bandwidth[p.device_id] for p in profiles])
    fleet = bw.mean()
    schedules = {}
    for c in range(k):
        cluster_bw = bw[labels == c].mean()
        beta = base.beta if k == 1 else base.beta * fleet / cluster_bw
        schedules[c] = replace(base, beta=float(beta))
    return ClusterAssignment(tuple(int(v) for v in labels), k, schedules)


def broadcast_global(sim: NetworkSimulator, theta: ModelParams, index: BlockIndex,
                     targets, t_now: float, round_: int = 0) -> list:
    """Send the full-precision model to each target; returns the scheduled events."""
    payload = model_payload(CLOUD_SENDER, round_, theta.values, index)
    return [sim.transmit(CLOUD, dev, payload.nbytes, t_now, payload) for dev in targets]
