"""
ACE-Sync against the three baselines
====================================

Runs every method on the default workload for a couple of seeds and prints
the comparison table. Takes a few seconds on a laptop.
"""

from acesync.harness import ExperimentConfig, compare

base = ExperimentConfig()
methods = ["fullsync", "topk", "fedavg_periodic", "acesync"]
report = compare([base.replace(method=m) for m in methods], seeds=[1, 2])
print(report.table())

full = report.row("fullsync").uplink_gb
for m in methods[1:]:
    print(f"{m:<16} sends {report.row(m).uplink_gb / full:.1%} of FullSync's uplink")

# the logs are kept on the report for further digging
log = report.logs[("acesync", 1)]
print("acesync sync interval per round:", [r.sync_interval for r in log.rows])
