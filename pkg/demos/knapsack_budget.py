"""
Choosing blocks under a byte budget
===================================

Every block is a knapsack item worth its importance score and weighing its
framed size. The greedy solver is what runs each round; the DP is exact
and only practical for small instances.
"""

import numpy as np

from acesync.budget import (KnapsackItem, byte_budget, plan_transmission, select_knapsack_exact,
                            select_knapsack_greedy, total_value)
from acesync.compression import CompressionSchedule, schedule_ratio
from acesync.importance import ImportanceScore
from acesync.tensor import init_model, partition_blocks

# the textbook instance where ratio-greedy is not optimal
items = [KnapsackItem(0, 60, 10), KnapsackItem(1, 100, 20), KnapsackItem(2, 120, 30)]
for name, solve in (("greedy", select_knapsack_greedy), ("exact", select_knapsack_exact)):
    sel = solve(items, 50)
    print(f"{name:>6}: blocks {sel.block_ids}, value {total_value(items, sel):g}")

# plans for the default model at a few link speeds, 4 ms send window
params = init_model([20, 64, 5], seed=0)
index = partition_blocks(params, 64)
scores = ImportanceScore(np.random.default_rng(3).random(len(index)), 0.7)
sched = CompressionSchedule()
full_sync = index.num_params * 4 + 16 + 8 * len(index)
for B in (5.0, 20.0, 100.0):
    budget = byte_budget(B, 0.004)
    plan = plan_transmission(scores, 0.2, schedule_ratio(B, sched), sched, index, budget)
    print(f"{B:>5g} Mbps, budget {budget:>5} B: {len(plan.full_ids)} full + {len(plan.quantized_ids):>2} "
          f"blocks at {plan.bits:>2} bits = {plan.total_bytes} B (full sync {full_sync} B)")
