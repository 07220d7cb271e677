"""Experiment configuration and its YAML mapping.

Every key in a config file must name a field below; unknown keys raise
``ConfigurationError`` so that typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import yaml

from ..errors import ConfigurationError

METHODS = ("acesync", "fullsync", "topk", "fedavg_periodic")


@dataclass(frozen=True)
class DataConfig:
    M: int = 10_000
    C: int = 5
    class_sep: float = 3.0
    noise_sigma: float = 1.0
    val_fraction: float = 0.2


@dataclass(frozen=True)
class DeviceConfig:
    K: int = 8
    batch_size: int = 32
    compute_time_range: tuple = (0.005, 0.05)
    reliability_range: tuple = (0.8, 1.0)
    # each device draws one tier; its trace wanders inside that tier's range
    bandwidth_tiers: tuple = ((5.0, 40.0), (20.0, 120.0), (60.0, 200.0))
    latency_range: tuple = (10.0, 300.0)
    trace_duration_s: float = 120.0
    trace_step_s: float = 0.5
    jitter_sigma: float = 0.15
    reversion: float = 0.2
    trace_file: Optional[str] = None


@dataclass(frozen=True)
class PolicyConfig:
    p: float = 0.2
    alpha: float = 0.7
    w1: float = 4.0
    w2: float = 1.0
    rho: float = 0.9
    T: int = 16
    eta: float = 0.1
    beta: float = 0.02
    c_min: float = 0.25
    c_max: float = 0.9
    b_min: int = 2
    b_max: int = 16
    gamma: float = 0.9
    lam: float = 0.0
    tau_mode: Union[str, float] = "median"
    I_min: int = 1
    I_max: int = 8
    block_size: int = 64
    clusters_k: int = 2
    budget_window_s: Optional[float] = 0.004
    use_reliability: bool = True


@dataclass(frozen=True)
class BaselineConfig:
    topk_fraction: float = 0.1
    fedavg_period: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "acesync"
    arch: tuple = (20, 64, 5)
    data: DataConfig = field(default_factory=DataConfig)
    devices: DeviceConfig = field(default_factory=DeviceConfig)
    rounds: int = 40
    local_batches_per_round: int = 4
    lr: float = 0.05
    optimizer: str = "sgd"
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    seed: int = 1

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_policy(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, policy=dataclasses.replace(self.policy, **changes))

    def with_baseline(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, baseline=dataclasses.replace(self.baseline, **changes))


def _require(cond, msg):
    if not cond:
        raise ConfigurationError(msg)


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg.method in METHODS, f"method must be one of {METHODS}, got {cfg.method!r}")
    _require(len(cfg.arch) >= 2 and all(int(w) >= 1 for w in cfg.arch), "arch needs >= 2 positive widths")
    _require(cfg.arch[-1] == cfg.data.C, "output width must equal the number of classes")
    _require(cfg.rounds >= 0, "rounds must be >= 0")
    _require(cfg.local_batches_per_round >= 1, "local_batches_per_round must be >= 1")
    _require(cfg.lr > 0, "lr must be positive")
    _require(cfg.optimizer in ("sgd", "adamw"), "optimizer must be sgd or adamw")
    d = cfg.data
    _require(d.M >= d.C >= 2, "data needs M >= C >= 2")
    _require(d.noise_sigma >= 0 and d.class_sep >= 0, "class_sep and noise_sigma must be >= 0")
    _require(0 < d.val_fraction < 1, "val_fraction must lie in (0, 1)")
    dev = cfg.devices
    _require(dev.K >= 1 and dev.batch_size >= 1, "need K >= 1 and batch_size >= 1")
    n_train = d.M - int(round(d.M * d.val_fraction))
    _require(n_train >= dev.K, "fewer training samples than devices")
    _require(0 < dev.compute_time_range[0] <= dev.compute_time_range[1], "bad compute_time_range")
    _require(0 <= dev.reliability_range[0] <= dev.reliability_range[1] <= 1, "bad reliability_range")
    _require(len(dev.bandwidth_tiers) >= 1, "need at least one bandwidth tier")
    for lo, hi in dev.bandwidth_tiers:
        _require(5.0 <= lo <= hi <= 200.0, f"bandwidth tier ({lo}, {hi}) outside [5, 200] Mbps")
    _require(10.0 <= dev.latency_range[0] <= dev.latency_range[1] <= 300.0, "latency range outside [10, 300] ms")
    p = cfg.policy
    _require(0 <= p.p <= 1, "p must lie in [0, 1]")
    _require(0 <= p.alpha <= 1, "alpha must lie in [0, 1]")
    _require(0 <= p.rho <= 1 and p.T >= 1, "need rho in [0, 1] and T >= 1")
    _require(0 < p.c_min <= p.c_max <= 1, "need 0 < c_min <= c_max <= 1")
    _require(p.beta >= 0, "beta must be >= 0")
    _require(2 <= p.b_min <= p.b_max <= 16, "need 2 <= b_min <= b_max <= 16")
    _require(p.gamma >= 0, "gamma must be >= 0")
    _require(0 <= p.lam <= 1, "lam must lie in [0, 1]")
    _require(p.tau_mode == "median" or (isinstance(p.tau_mode, (int, float)) and p.tau_mode > 0),
             "tau_mode must be 'median' or a positive number")
    _require(1 <= p.I_min <= p.I_max, "need 1 <= I_min <= I_max")
    _require(p.block_size >= 1, "block_size must be >= 1")
    _require(1 <= p.clusters_k <= dev.K, "clusters_k must lie in [1, K]")
    _require(p.budget_window_s is None or p.budget_window_s > 0, "budget_window_s must be positive or null")
    b = cfg.baseline
    _require(0 < b.topk_fraction <= 1, "topk_fraction must lie in (0, 1]")
    _require(b.fedavg_period >= 1, "fedavg_period must be >= 1")


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name)
        else:
            kwargs[name] = _tuplify(value)
    return cls(**kwargs)


_NESTED = {
    (ExperimentConfig, "data"): DataConfig,
    (ExperimentConfig, "devices"): DeviceConfig,
    (ExperimentConfig, "policy"): PolicyConfig,
    (ExperimentConfig, "baseline"): BaselineConfig,
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        return _build(ExperimentConfig, raw, "")
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = {g.name: plain(getattr(v, g.name)) for g in fields(v)}
        else:
            out[f.name] = plain(v)
    return out


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return config_from_dict(raw or {})


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
