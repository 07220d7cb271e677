"""Round-based simulation of ACE-Sync and the three baselines.

Every method shares the same data shards, initial model, device profiles,
traces and local mini-batch streams for a given seed, so runs differ only
in what is communicated.

Per round each device runs ``local_batches_per_round`` SGD steps on its own
model copy and reports the summed gradient of those steps. The cloud applies
``theta <- theta - lr * sum_k w_k * g_k``. FedAvg-Periodic instead uploads
whole models every ``fedavg_period`` rounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..budget import byte_budget, plan_transmission
from ..compression import (CompressionSchedule, ErrorFeedbackState, accumulate_residual,
                           apply_error_feedback, quantize_block, schedule_ratio)
from ..coordinator import (GradientCache, SyncController, aggregate, broadcast_global,
                           cluster_devices, compute_divergence, device_weights,
                           reconstruct_update)
from ..errors import ConfigurationError, InvariantViolation
from ..importance import (GradStats, TemporalAttentionParams, calibrate_attention,
                          fuse_importance, rank_blocks, structural_attention,
                          temporal_attention, top_p_count, update_grad_stats)
from ..netsim import (CLOUD, DeviceProfile, NetworkSimulator, TraceSpec, gen_trace,
                      load_traces, sample_bandwidth)
from ..tensor import (DataSpec, Dataset, ModelParams, apply_update, forward_loss, init_model,
                      loss_and_grad, make_synthetic_dataset, partition_blocks)
from ..wire import BlockPayload, SparsePayload, model_payload
from .config import ExperimentConfig
from .metrics import MetricsLog, MetricsRow

Observer = Callable[[str, dict], None]


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass
class Environment:
    cfg: ExperimentConfig
    shards: list
    val: Dataset
    profiles: list
    traces: dict
    weights: np.ndarray
    theta0: ModelParams
    index: object
    rounds_per_epoch: int


def make_fleet(cfg: ExperimentConfig, dataset_sizes=None):
    """Device profiles and bandwidth traces for ``cfg.seed``.

    Traces come from ``devices.trace_file`` when set, otherwise each device
    draws a bandwidth tier and gets a generated trace inside it.
    """
    dev = cfg.devices
    K = dev.K
    if dataset_sizes is None:
        n_train = cfg.data.M - int(round(cfg.data.M * cfg.data.val_fraction))
        dataset_sizes = [len(a) for a in np.array_split(np.arange(n_train), K)]
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    compute = rng.uniform(*dev.compute_time_range, size=K)
    reliab = rng.uniform(*dev.reliability_range, size=K)
    tiers = rng.integers(len(dev.bandwidth_tiers), size=K)
    profiles = [DeviceProfile(k, float(compute[k]), int(dataset_sizes[k]), float(reliab[k]), k)
                for k in range(K)]
    if dev.trace_file:
        loaded = load_traces(dev.trace_file)
        missing = [k for k in range(K) if k not in loaded]
        if missing:
            raise ConfigurationError(f"trace file lacks devices {missing}")
        return profiles, {k: loaded[k] for k in range(K)}
    traces = {}
    for k in range(K):
        spec = TraceSpec(dev.trace_duration_s, dev.trace_step_s, tuple(dev.bandwidth_tiers[tiers[k]]),
                         tuple(dev.latency_range), dev.jitter_sigma, dev.reversion)
        traces[k] = gen_trace(spec, derive_seed(cfg.seed, 2, k), device_id=k)
    return profiles, traces


def build_environment(cfg: ExperimentConfig) -> Environment:
    d = cfg.data
    data = make_synthetic_dataset(DataSpec(d.M, cfg.arch[0], d.C, d.class_sep, d.noise_sigma),
                                  derive_seed(cfg.seed, 0))
    n_val = int(round(d.M * d.val_fraction))
    n_train = d.M - n_val
    train = data.subset(np.arange(n_train))
    val = data.subset(np.arange(n_train, d.M))
    K = cfg.devices.K
    shards = [train.subset(part) for part in np.array_split(np.arange(n_train), K)]

    profiles, traces = make_fleet(cfg, [len(sh) for sh in shards])
    theta0 = init_model(cfg.arch, derive_seed(cfg.seed, 3))
    index = partition_blocks(theta0, cfg.policy.block_size)
    batches_per_epoch = math.ceil(max(len(s) for s in shards) / cfg.devices.batch_size)
    rounds_per_epoch = math.ceil(batches_per_epoch / cfg.local_batches_per_round)
    weights = device_weights(profiles, cfg.policy.use_reliability)
    return Environment(cfg, shards, val, profiles, traces, weights, theta0, index, rounds_per_epoch)


class Worker:
    """One edge device: local data stream and local model copy."""

    def __init__(self, profile: DeviceProfile, shard: Dataset, theta: ModelParams,
                 batch_size: int, seed: int):
        self.id = profile.device_id
        self.profile = profile
        self.shard = shard
        self.theta = theta.copy()
        self.batch_size = batch_size
        self._rng = np.random.default_rng(seed)
        self._stream = self._batches()

    def _batches(self):
        n = len(self.shard)
        while True:
            perm = self._rng.permutation(n)
            for s in range(0, n, self.batch_size):
                yield perm[s:s + self.batch_size]

    def local_round(self, steps: int, lr: float):
        """Run local SGD; return (summed gradient, mean batch loss)."""
        g_sum = np.zeros(self.theta.size)
        losses = []
        for _ in range(steps):
            idx = next(self._stream)
            loss, g = loss_and_grad(self.theta, (self.shard.features[idx], self.shard.labels[idx]))
            self.theta = apply_update(self.theta, g, lr)
            g_sum += g
            losses.append(loss)
        return g_sum, float(np.mean(losses))


class ServerOptimizer:
    def __init__(self, kind: str, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.kind = kind
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = self.v = None
        self.t = 0

    def step(self, theta: ModelParams, G: np.ndarray) -> ModelParams:
        if self.kind == "sgd":
            return apply_update(theta, G, self.lr)
        if self.m is None:
            self.m = np.zeros_like(G)
            self.v = np.zeros_like(G)
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * G
        self.v = b2 * self.v + (1 - b2) * G * G
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return apply_update(theta, m_hat / (np.sqrt(v_hat) + self.eps) + self.wd * theta.values, self.lr)


class MethodRunner:
    method = ""

    def __init__(self, env: Environment, observer: Optional[Observer] = None):
        self.env = env
        self.cfg = env.cfg
        self.observer = observer or (lambda name, data: None)
        self.sim = NetworkSimulator(env.traces)
        self.theta = env.theta0.copy()
        self.workers = [Worker(p, env.shards[p.device_id], env.theta0, self.cfg.devices.batch_size,
                               derive_seed(self.cfg.seed, 4, p.device_id)) for p in env.profiles]
        self.optimizer = ServerOptimizer(self.cfg.optimizer, self.cfg.lr)
        self.now = 0.0
        self._val = (env.val.features, env.val.labels)

    # -- shared pieces --------------------------------------------------

    def local_phase(self):
        steps, lr = self.cfg.local_batches_per_round, self.cfg.lr
        out = {}
        for w in self.workers:
            g, loss = w.local_round(steps, lr)
            out[w.id] = (g, loss, self.now + steps * w.profile.compute_time_per_batch_s)
        return out

    def deliver(self):
        """Drain the queue; return payloads keyed by sender and the finish time."""
        received = {}
        end = self.now
        for ev in self.sim.drain():
            received[ev.payload.src if ev.payload.dst == CLOUD else ev.payload.dst] = ev.payload.data
            end = max(end, ev.time)
        return received, end

    def broadcast(self, round_: int):
        broadcast_global(self.sim, self.theta, self.env.index, [w.id for w in self.workers], self.now, round_)
        _, self.now = self.deliver()
        for w in self.workers:
            w.theta = self.theta.copy()

    def divergences(self):
        return [compute_divergence(w.theta, self.theta) for w in self.workers]

    def evaluate(self) -> float:
        return forward_loss(self.theta, self._val).correct / len(self.env.val)

    def row(self, round_, up, down, losses, divs, interval, c_mean) -> MetricsRow:
        return MetricsRow(
            round=round_,
            epoch=math.ceil(round_ / self.env.rounds_per_epoch),
            uplink_bytes=int(up),
            downlink_bytes=int(down),
            train_loss=float(np.mean(losses)),
            val_accuracy=float(self.evaluate()),
            mean_divergence=float(np.mean(divs)),
            max_divergence=float(np.max(divs)),
            sync_interval=int(interval),
            mean_compression_c=float(c_mean),
            sim_time_s=float(self.now),
        )

    def run_round(self, round_: int) -> MetricsRow:
        raise NotImplementedError


class GradientExchangeRunner(MethodRunner):
    """Skeleton for methods that upload a (possibly compressed) update every round."""

    def encode(self, worker: Worker, g: np.ndarray, t_send: float, round_: int):
        raise NotImplementedError

    def decode(self, received: dict) -> dict:
        raise NotImplementedError

    def sync_due(self, divs) -> bool:
        return True

    def interval(self) -> int:
        return 1

    def after_aggregate(self, G: np.ndarray, synced: bool):
        pass

    def run_round(self, round_: int) -> MetricsRow:
        up0, down0 = self.sim.uplink_bytes(), self.sim.downlink_bytes()
        local = self.local_phase()
        self.c_values = []
        for w in self.workers:
            g, _, t_send = local[w.id]
            payload = self.encode(w, g, t_send, round_)
            self.sim.transmit(w.id, CLOUD, payload.nbytes, t_send, payload)
        received, self.now = self.deliver()
        G = aggregate(self.decode(received), self.env.weights)
        self.observer("global_update", {"round": round_, "update": G})
        self.theta = self.optimizer.step(self.theta, G)
        divs = self.divergences()
        synced = self.sync_due(divs)
        self.after_aggregate(G, synced)
        if synced:
            self.broadcast(round_)
        c_mean = float(np.mean(self.c_values)) if self.c_values else 0.0
        return self.row(round_, self.sim.uplink_bytes() - up0, self.sim.downlink_bytes() - down0,
                        [local[w.id][1] for w in self.workers], divs, self.interval(), c_mean)


class FullSyncRunner(GradientExchangeRunner):
    method = "fullsync"

    def encode(self, worker, g, t_send, round_):
        return model_payload(worker.id, round_, g, self.env.index)

    def decode(self, received):
        return reconstruct_update(received, GradientCache(0.0), self.env.index)


class TopKRunner(GradientExchangeRunner):
    """Per-coordinate magnitude top-k with classic (unit-weight) error feedback."""

    method = "topk"

    def __init__(self, env, observer=None):
        super().__init__(env, observer)
        n = env.theta0.size
        self.k = top_p_count(self.cfg.baseline.topk_fraction, n)
        self.ef = {w.id: ErrorFeedbackState.zeros(n, gamma=1.0) for w in self.workers}

    def encode(self, worker, g, t_send, round_):
        ef = self.ef[worker.id]
        corrected = apply_error_feedback(g, ef)
        idx = np.sort(rank_blocks(np.abs(corrected))[: self.k])
        sent = np.zeros_like(corrected)
        sent[idx] = corrected[idx]
        self.ef[worker.id] = accumulate_residual(ef, corrected, sent)
        return SparsePayload(worker.id, round_, idx, corrected[idx])

    def decode(self, received):
        out = {}
        for dev in sorted(received):
            g = np.zeros(self.env.theta0.size)
            g[received[dev].indices] = received[dev].values
            out[dev] = g
        return out


class AceSyncRunner(GradientExchangeRunner):
    method = "acesync"

    def __init__(self, env, observer=None):
        super().__init__(env, observer)
        pol = self.cfg.policy
        n, nb = env.theta0.size, len(env.index)
        self.pol = pol
        self.attn = TemporalAttentionParams(pol.w1, pol.w2)
        self.device_attn = {w.id: self.attn for w in self.workers}
        self.stats = {w.id: GradStats.empty(nb, pol.T, pol.rho) for w in self.workers}
        self.cloud_stats = GradStats.empty(nb, pol.T, pol.rho)
        self.ef = {w.id: ErrorFeedbackState.zeros(n, pol.gamma) for w in self.workers}
        self.sent_cache = {w.id: {} for w in self.workers}
        self.cache = GradientCache(pol.lam)
        self.struct = structural_attention(env.index, env.theta0.num_layers)
        base = CompressionSchedule(pol.c_min, pol.c_max, pol.beta, pol.b_min, pol.b_max)
        mean_bw = {k: float(tr.bandwidth_mbps.mean()) for k, tr in env.traces.items()}
        self.clusters = cluster_devices(env.profiles, pol.clusters_k, derive_seed(self.cfg.seed, 5),
                                        mean_bw, base)
        tau = None if pol.tau_mode == "median" else float(pol.tau_mode)
        self.controller = SyncController(tau, pol.I_min, pol.I_max)
        self.since_sync = 0
        self.round_ = 0

    def encode(self, worker, g, t_send, round_):
        pol, index = self.pol, self.env.index
        ef = self.ef[worker.id]
        corrected = apply_error_feedback(g, ef)
        self.stats[worker.id] = stats = update_grad_stats(self.stats[worker.id], corrected, index)
        temp = temporal_attention(stats, self.device_attn[worker.id])
        importance = fuse_importance(temp, self.struct, pol.alpha)
        sched = self.clusters.schedule_for(worker.id)
        B = sample_bandwidth(self.env.traces[worker.id], t_send).bandwidth_mbps
        c = schedule_ratio(B, sched)
        self.c_values.append(c)
        budget = byte_budget(B, pol.budget_window_s)
        plan = plan_transmission(importance, pol.p, c, sched, index, budget)
        full = {b: corrected[index.slice(b)].copy() for b in plan.full_ids}
        quant = {b: quantize_block(corrected[index.slice(b)], plan.bits, b) for b in plan.quantized_ids}
        payload = BlockPayload(worker.id, round_, full, quant)

        sent = np.zeros_like(corrected)
        mirror = self.sent_cache[worker.id]
        for bid, values in payload.blocks():
            sent[index.slice(bid)] = values
            mirror[bid] = values
        if pol.lam > 0:
            # the cloud replays cached blocks; mirror it so the residual stays exact
            for bid, values in mirror.items():
                if bid not in payload.full and bid not in payload.quantized:
                    sent[index.slice(bid)] = pol.lam * values
        new_ef = accumulate_residual(ef, corrected, sent)
        self.observer("residual", {"round": round_, "device": worker.id, "g": g, "sent": sent,
                                   "e_prev": ef.residual, "e_next": new_ef.residual, "gamma": ef.gamma})
        self.ef[worker.id] = new_ef
        return payload

    def decode(self, received):
        return reconstruct_update(received, self.cache, self.env.index, self.round_)

    def sync_due(self, divs) -> bool:
        interval = self.controller.control_step(divs)
        self.since_sync += 1
        if self.since_sync >= interval:
            self.since_sync = 0
            return True
        return False

    def interval(self) -> int:
        return self.controller.interval

    def after_aggregate(self, G, synced):
        self.cloud_stats = update_grad_stats(self.cloud_stats, G, self.env.index)
        if synced:
            self.attn = calibrate_attention(self.attn, self.cloud_stats, self.pol.eta)
            # the refreshed weights ride along with the model broadcast
            for w in self.workers:
                self.device_attn[w.id] = self.attn

    def run_round(self, round_):
        self.round_ = round_
        return super().run_round(round_)


class FedAvgPeriodicRunner(MethodRunner):
    method = "fedavg_periodic"

    def run_round(self, round_):
        up0, down0 = self.sim.uplink_bytes(), self.sim.downlink_bytes()
        local = self.local_phase()
        E = self.cfg.baseline.fedavg_period
        if round_ % E == 0:
            for w in self.workers:
                payload = model_payload(w.id, round_, w.theta.values, self.env.index)
                self.sim.transmit(w.id, CLOUD, payload.nbytes, local[w.id][2], payload)
            received, self.now = self.deliver()
            models = reconstruct_update(received, GradientCache(0.0), self.env.index)
            new = aggregate(models, self.env.weights)
            self.observer("global_update", {"round": round_, "update": (self.theta.values - new) / self.cfg.lr})
            self.theta = self.theta.with_values(new)
            divs = self.divergences()
            self.broadcast(round_)
        else:
            self.now = max(t for _, _, t in local.values())
            divs = self.divergences()
        return self.row(round_, self.sim.uplink_bytes() - up0, self.sim.downlink_bytes() - down0,
                        [local[w.id][1] for w in self.workers], divs, E, 0.0)


RUNNERS = {
    "fullsync": FullSyncRunner,
    "topk": TopKRunner,
    "acesync": AceSyncRunner,
    "fedavg_periodic": FedAvgPeriodicRunner,
}


def run_experiment(config: ExperimentConfig, observer: Optional[Observer] = None) -> MetricsLog:
    """Simulate ``config.rounds`` rounds of ``config.method``; one metrics row per round."""
    env = build_environment(config)
    runner = RUNNERS[config.method](env, observer)
    log = MetricsLog(method=config.method, seed=config.seed)
    for r in range(1, config.rounds + 1):
        log.append(runner.run_round(r))
    up, down = runner.sim.uplink_bytes(), runner.sim.downlink_bytes()
    if log.total_uplink != up or log.total_downlink != down:
        raise InvariantViolation("metrics byte totals disagree with the network counters")
    log.meta = {
        "netsim_uplink_bytes": up,
        "netsim_downlink_bytes": down,
        "netsim_counters": runner.sim.counters(),
        "netsim_events": list(runner.sim.log),
        "n_params": env.theta0.size,
        "n_blocks": len(env.index),
        "rounds_per_epoch": env.rounds_per_epoch,
        "final_theta": runner.theta.values.copy(),
    }
    return log


def run_baseline(config: ExperimentConfig, observer: Optional[Observer] = None) -> MetricsLog:
    if config.method not in ("fullsync", "topk", "fedavg_periodic"):
        raise ConfigurationError(f"{config.method!r} is not a baseline method")
    return run_experiment(config, observer)
