"""Run several methods over a shared seed list and tabulate them."""

from __future__ import annotations

from ..errors import ConfigurationError
from .metrics import ComparisonReport, summarize
from .runner import run_experiment

_SHARED = ("arch", "data", "devices", "rounds", "local_batches_per_round", "lr", "optimizer")


def compare(configs, seeds) -> ComparisonReport:
    """One row per config, each averaged over ``seeds``.

    Configs must agree on everything that defines the workload; only the
    method and its knobs may differ.
    """
    configs = list(configs)
    seeds = list(seeds)
    if len(configs) < 2:
        raise ConfigurationError("compare needs at least two configs")
    if not seeds:
        raise ConfigurationError("compare needs at least one seed")
    ref = configs[0]
    for cfg in configs[1:]:
        for name in _SHARED:
            if getattr(cfg, name) != getattr(ref, name):
                raise ConfigurationError(f"configs disagree on shared setting {name!r}")
    rows, logs = [], {}
    for i, cfg in enumerate(configs):
        label = cfg.method
        if any(c.method == cfg.method for c in configs[:i]):
            label = f"{cfg.method}#{i}"
        runs = []
        for s in seeds:
            log = run_experiment(cfg.replace(seed=s))
            logs[(label, s)] = log
            runs.append(log)
        rows.append(summarize(label, runs))
    return ComparisonReport(rows, logs)
