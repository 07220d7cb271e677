"""Per-block importance scoring and top-p selection.

Temporal attention looks at the history of block-mean gradient magnitudes,
structural attention at where a block sits in the network. The fused score
ranks blocks for full-precision synchronization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, ShapeError
from .tensor import BlockIndex


@dataclass(frozen=True)
class GradStats:
    ema_mag: np.ndarray
    window: np.ndarray  # (T, n_blocks) ring buffer, oldest row overwritten first
    rounds_seen: int = 0
    rho: float = 0.9

    @classmethod
    def empty(cls, n_blocks: int, T: int = 16, rho: float = 0.9) -> "GradStats":
        if T < 1:
            raise ConfigurationError("window length T must be >= 1")
        if not 0.0 <= rho <= 1.0:
            raise ConfigurationError("rho must lie in [0, 1]")
        return cls(np.zeros(n_blocks), np.zeros((T, n_blocks)), 0, rho)

    @property
    def T(self) -> int:
        return self.window.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.window.shape[1]

    def filled(self) -> np.ndarray:
        """Window rows currently holding observations, oldest first."""
        count = min(self.rounds_seen, self.T)
        if self.rounds_seen <= self.T:
            return self.window[:count]
        head = self.rounds_seen % self.T
        return np.concatenate([self.window[head:], self.window[:head]])

    def variance(self) -> np.ndarray:
        rows = self.filled()
        if rows.shape[0] < 2:
            return np.zeros(self.n_blocks)
        var = rows.var(axis=0)
        # constant windows must give exactly zero, not rounding noise
        var[np.ptp(rows, axis=0) == 0] = 0.0
        return var


@dataclass(frozen=True)
class TemporalAttentionParams:
    w1: float = 4.0
    w2: float = 1.0


@dataclass(frozen=True)
class ImportanceScore:
    scores: np.ndarray
    alpha: float


@dataclass(frozen=True)
class SelectionResult:
    block_ids: tuple
    p: Optional[float] = None

    def __len__(self):
        return len(self.block_ids)

    def __contains__(self, block_id):
        return block_id in self.block_ids


def block_mean_magnitudes(grad: np.ndarray, index: BlockIndex) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (index.num_params,):
        raise ShapeError(f"gradient length {grad.shape} does not match block index ({index.num_params})")
    starts = np.array([b.offset for b in index.blocks])
    sums = np.add.reduceat(np.abs(grad), starts)
    return sums / index.lengths()


def update_grad_stats(stats: GradStats, grad, index: BlockIndex) -> GradStats:
    mags = block_mean_magnitudes(grad, index)
    if mags.shape[0] != stats.n_blocks:
        raise ShapeError("block count differs from the statistics state")
    if stats.rounds_seen == 0:
        ema = mags.copy()
    else:
        ema = stats.rho * stats.ema_mag + (1.0 - stats.rho) * mags
    window = stats.window.copy()
    window[stats.rounds_seen % stats.T] = mags
    return replace(stats, ema_mag=ema, window=window, rounds_seen=stats.rounds_seen + 1)


def merge_stats(stats_list) -> GradStats:
    """Concatenate per-device statistics along the block axis."""
    first = stats_list[0]
    return GradStats(
        np.concatenate([s.ema_mag for s in stats_list]),
        np.concatenate([s.filled() for s in stats_list], axis=1),
        min(s.rounds_seen for s in stats_list),
        first.rho,
    )


def _pre_activation(stats: GradStats, params: TemporalAttentionParams) -> np.ndarray:
    return params.w1 * stats.ema_mag + params.w2 * stats.variance()


def temporal_attention(stats: GradStats, params: TemporalAttentionParams) -> np.ndarray:
    return expit(_pre_activation(stats, params))


def structural_attention(index: BlockIndex, L: int) -> np.ndarray:
    depth = np.array([b.depth for b in index.blocks], dtype=np.float64)
    if np.any(depth < 1) or np.any(depth > L):
        raise ConfigurationError(f"block depths must lie in 1..{L}")
    density = np.array([b.density for b in index.blocks])
    depth_score = np.ones_like(depth) if L == 1 else (L - depth) / (L - 1)
    return 0.5 * depth_score + 0.5 * (1.0 - density)


def fuse_importance(temp, struct, alpha: float) -> ImportanceScore:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    temp = np.asarray(temp, dtype=np.float64)
    struct = np.asarray(struct, dtype=np.float64)
    if temp.shape != struct.shape:
        raise ShapeError("temporal and structural score vectors differ in length")
    return ImportanceScore(alpha * temp + (1.0 - alpha) * struct, alpha)


def top_p_count(p: float, n_blocks: int) -> int:
    # round first so that e.g. 0.3 * 10 does not ceil to 4
    return min(n_blocks, math.ceil(round(p * n_blocks, 9)))


def rank_blocks(scores) -> np.ndarray:
    """Block ids by descending score, lower id first on ties."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def top_p_select(importance: ImportanceScore, p: float) -> SelectionResult:
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"p must lie in [0, 1], got {p}")
    k = top_p_count(p, importance.scores.shape[0])
    chosen = rank_blocks(importance.scores)[:k]
    return SelectionResult(tuple(sorted(int(i) for i in chosen)), p)


def calibrate_attention(params: TemporalAttentionParams, stats: GradStats,
                        eta: float = 0.1, eps: float = 1e-8) -> TemporalAttentionParams:
    """Damped step on ``w1`` that centres the mean logistic pre-activation."""
    if min(stats.rounds_seen, stats.T) < 2:
        return params
    mean_mag = float(stats.ema_mag.mean())
    z_bar = float(_pre_activation(stats, params).mean())
    if z_bar == 0.0 or mean_mag == 0.0:
        return params
    return replace(params, w1=params.w1 - eta * z_bar / (mean_mag + eps))
