"""Byte-budgeted block selection.

Each block is a 0/1 knapsack item worth its fused importance and weighing
its framed byte size. ``select_knapsack_greedy`` is the production path;
``select_knapsack_exact`` is a dynamic-programming oracle for tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .compression import (MESSAGE_HEADER_BYTES, CompressionSchedule, block_payload_bytes,
                          ratio_to_bits)
from .errors import CapacityError, ConfigurationError
from .importance import ImportanceScore, SelectionResult, top_p_select
from .tensor import BlockIndex

MAX_EXACT_ITEMS = 64
MAX_EXACT_CAPACITY = 10**6


class KnapsackItem(NamedTuple):
    block_id: int
    value: float
    weight: int


def byte_budget(B: float, window_s: Optional[float], overhead: int = MESSAGE_HEADER_BYTES) -> float:
    """Bytes a device may put on the wire in one round window.

    ``window_s=None`` gives an unbounded budget.
    """
    if B < 0:
        raise ConfigurationError("bandwidth must be non-negative")
    if window_s is None:
        return math.inf
    if not window_s > 0:
        raise ConfigurationError("window_s must be positive")
    return max(0, math.floor(B * 1e6 * window_s / 8) - overhead)


def _check_items(items):
    seen = set()
    for it in items:
        if it.weight <= 0:
            raise ConfigurationError(f"item {it.block_id} has non-positive weight")
        if it.value < 0:
            raise ConfigurationError(f"item {it.block_id} has negative value")
        if it.block_id in seen:
            raise ConfigurationError(f"duplicate block id {it.block_id}")
        seen.add(it.block_id)


def total_value(items, selection: SelectionResult) -> float:
    chosen = set(selection.block_ids)
    return sum(it.value for it in items if it.block_id in chosen)


def total_weight(items, selection: SelectionResult) -> int:
    chosen = set(selection.block_ids)
    return sum(it.weight for it in items if it.block_id in chosen)


def select_knapsack_greedy(items: Sequence[KnapsackItem], budget: float) -> SelectionResult:
    """Ratio-greedy fill, then keep the better of that set and the best single item.

    The max-of-two rule guarantees at least half the optimal value.
    """
    _check_items(items)
    order = sorted(items, key=lambda it: (-it.value / it.weight, -it.value, it.block_id))
    remaining = budget
    greedy = []
    for it in order:
        if it.weight <= remaining:
            greedy.append(it)
            remaining -= it.weight
    feasible = [it for it in items if it.weight <= budget]
    if feasible:
        best = min(feasible, key=lambda it: (-it.value, it.block_id))
        if best.value > sum(it.value for it in greedy):
            greedy = [best]
    return SelectionResult(tuple(sorted(it.block_id for it in greedy)))


def select_knapsack_exact(items: Sequence[KnapsackItem], budget: float,
                          max_items: int = MAX_EXACT_ITEMS,
                          max_capacity: int = MAX_EXACT_CAPACITY) -> SelectionResult:
    """Optimal subset by DP over byte capacity.

    Ties on value go to fewer items, then to the lexicographically smallest
    sorted id tuple.
    """
    _check_items(items)
    if len(items) > max_items:
        raise CapacityError(f"{len(items)} items exceeds the exact-solver limit {max_items}")
    cap = int(min(budget, sum(it.weight for it in items))) if items else 0
    if cap > max_capacity:
        raise CapacityError(f"capacity {cap} exceeds the exact-solver limit {max_capacity}")
    if not items or cap <= 0:
        return SelectionResult(())
    # largest id first, so reconstruction decides the smallest ids first
    order = sorted(items, key=lambda it: -it.block_id)
    m = len(order)
    tol = 1e-12 * max(1.0, sum(it.value for it in items))
    val = np.zeros((m + 1, cap + 1))
    cnt = np.zeros((m + 1, cap + 1), dtype=np.int64)
    for i, it in enumerate(order, start=1):
        val[i] = val[i - 1]
        cnt[i] = cnt[i - 1]
        w = it.weight
        if w > cap:
            continue
        take_v = val[i - 1, :-w] + it.value
        take_c = cnt[i - 1, :-w] + 1
        cur_v = val[i, w:]
        cur_c = cnt[i, w:]
        better = (take_v > cur_v + tol) | ((np.abs(take_v - cur_v) <= tol) & (take_c < cur_c))
        cur_v[better] = take_v[better]
        cur_c[better] = take_c[better]
    chosen = []
    w = cap
    for i in range(m, 0, -1):
        it = order[i - 1]
        if it.weight <= w:
            tv = val[i - 1, w - it.weight] + it.value
            tc = cnt[i - 1, w - it.weight] + 1
            if abs(tv - val[i, w]) <= tol and tc == cnt[i, w]:
                chosen.append(it.block_id)
                w -= it.weight
    return SelectionResult(tuple(sorted(chosen)))


@dataclass(frozen=True)
class TransmissionPlan:
    full_ids: tuple
    quantized_ids: tuple
    bits: int
    block_bytes: dict

    @property
    def block_ids(self) -> tuple:
        return tuple(sorted(self.full_ids + self.quantized_ids))

    @property
    def total_bytes(self) -> int:
        return MESSAGE_HEADER_BYTES + sum(self.block_bytes.values())


def assign_precision(selection: SelectionResult, top: SelectionResult, c: float,
                     sched: CompressionSchedule, index: BlockIndex) -> TransmissionPlan:
    """Selected blocks inside the top-p set go full precision, the rest quantized."""
    bits = ratio_to_bits(c, sched)
    top_ids = set(top.block_ids)
    full, quant, sizes = [], [], {}
    for bid in selection.block_ids:
        length = index.blocks[bid].length
        if bid in top_ids:
            full.append(bid)
            sizes[bid] = block_payload_bytes(length, None)
        else:
            quant.append(bid)
            sizes[bid] = block_payload_bytes(length, bits)
    return TransmissionPlan(tuple(full), tuple(quant), bits, sizes)


def plan_transmission(importance: ImportanceScore, p: float, c: float,
                      sched: CompressionSchedule, index: BlockIndex,
                      budget: float) -> TransmissionPlan:
    """Top-p blocks at full precision first, then fill the rest of the budget
    with quantized blocks. If the top-p set alone does not fit, the knapsack
    runs over the top-p blocks only and everything else waits."""
    top = top_p_select(importance, p)
    bits = ratio_to_bits(c, sched)
    scores = importance.scores
    full_items = [KnapsackItem(b, float(scores[b]), block_payload_bytes(index.blocks[b].length, None))
                  for b in top.block_ids]
    full_weight = sum(it.weight for it in full_items)
    if full_weight > budget:
        chosen = select_knapsack_greedy(full_items, budget)
        return assign_precision(chosen, top, c, sched, index)
    top_ids = set(top.block_ids)
    rest = [KnapsackItem(b.block_id, float(scores[b.block_id]), block_payload_bytes(b.length, bits))
            for b in index.blocks if b.block_id not in top_ids]
    extra = select_knapsack_greedy(rest, budget - full_weight)
    chosen = SelectionResult(tuple(sorted(top.block_ids + extra.block_ids)))
    return assign_precision(chosen, top, c, sched, index)
