"""Bandwidth-driven compression schedule, norm-scaled quantizer, error feedback.

Byte sizes follow the wire layout in :mod:`acesync.wire`; the functions here
only count, they never build buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Optional, Union

import numpy as np

from .errors import ConfigurationError, NumericError, ShapeError
from .tensor import BlockIndex

MESSAGE_HEADER_BYTES = 16
BLOCK_HEADER_BYTES = 8
SCALE_BYTES = 4
FLOAT_BYTES = 4
SPARSE_ITEM_BYTES = 8


@dataclass(frozen=True)
class CompressionSchedule:
    c_min: float = 0.25
    c_max: float = 0.9
    beta: float = 0.02
    b_min: int = 2
    b_max: int = 16

    def __post_init__(self):
        if not 0.0 < self.c_min <= self.c_max <= 1.0:
            raise ConfigurationError(f"need 0 < c_min <= c_max <= 1, got {self.c_min}, {self.c_max}")
        if self.beta < 0:
            raise ConfigurationError("beta must be non-negative")
        if not 2 <= self.b_min <= self.b_max <= 16:
            raise ConfigurationError(f"need 2 <= b_min <= b_max <= 16, got {self.b_min}, {self.b_max}")


@dataclass(frozen=True)
class QuantizedBlock:
    block_id: int
    negative: np.ndarray  # one sign bit per element
    levels: np.ndarray
    scale: float
    bits: int

    @property
    def max_level(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class ErrorFeedbackState:
    residual: np.ndarray
    gamma: float = 0.9

    @classmethod
    def zeros(cls, n: int, gamma: float = 0.9) -> "ErrorFeedbackState":
        if gamma < 0:
            raise ConfigurationError("gamma must be non-negative")
        return cls(np.zeros(n), gamma)


def schedule_ratio(B: float, sched: CompressionSchedule) -> float:
    if B < 0:
        raise ConfigurationError("bandwidth must be non-negative")
    c = sched.c_min + (sched.c_max - sched.c_min) * math.exp(-sched.beta * B)
    return min(max(c, sched.c_min), sched.c_max)  # rounding can overshoot by an ulp


def ratio_to_bits(c: float, sched: CompressionSchedule) -> int:
    b = math.floor((1.0 - c) * sched.b_max + 0.5)
    return int(min(max(b, sched.b_min), sched.b_max))


def block_norm(g: np.ndarray) -> float:
    """l2 norm that does not underflow or overflow for extreme magnitudes."""
    m = float(np.max(np.abs(g)))
    if m == 0.0 or not math.isfinite(m):
        return m
    return m * float(np.linalg.norm(g / m))


def quantize_block(g_block, bits: int, block_id: int = 0) -> QuantizedBlock:
    g = np.asarray(g_block, dtype=np.float64)
    if not 2 <= bits <= 16:
        raise ConfigurationError(f"bits must lie in [2, 16], got {bits}")
    if g.size == 0:
        raise ShapeError("cannot quantize an empty block")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite value in gradient block")
    scale = block_norm(g)
    negative = g < 0
    if scale == 0.0:
        return QuantizedBlock(block_id, negative, np.zeros(g.size, dtype=np.uint32), 0.0, bits)
    top = (1 << bits) - 1
    levels = np.rint(np.abs(g) / scale * top).astype(np.uint32)
    return QuantizedBlock(block_id, negative, levels, scale, bits)


def dequantize_block(qb: QuantizedBlock) -> np.ndarray:
    signs = np.where(qb.negative, -1.0, 1.0)
    return signs * qb.scale * (qb.levels / qb.max_level)


def apply_error_feedback(g, ef: ErrorFeedbackState) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != ef.residual.shape:
        raise ShapeError("gradient and residual lengths differ")
    return g + ef.gamma * ef.residual


def accumulate_residual(ef: ErrorFeedbackState, corrected, sent) -> ErrorFeedbackState:
    corrected = np.asarray(corrected, dtype=np.float64)
    sent = np.asarray(sent, dtype=np.float64)
    if corrected.shape != ef.residual.shape or sent.shape != ef.residual.shape:
        raise ShapeError("residual update lengths differ")
    return replace(ef, residual=corrected - sent)


def block_payload_bytes(length: int, bits: Optional[int]) -> int:
    """Bytes for one framed block; ``bits=None`` means full precision."""
    if bits is None:
        return BLOCK_HEADER_BYTES + FLOAT_BYTES * length
    return BLOCK_HEADER_BYTES + SCALE_BYTES + math.ceil(length * (bits + 1) / 8)


def payload_size(selection, blocks: BlockIndex,
                 bits_per_block: Union[int, Mapping[int, int], None],
                 full_precision_ids) -> int:
    ids = getattr(selection, "block_ids", selection)
    full = set(full_precision_ids)
    total = MESSAGE_HEADER_BYTES
    for bid in ids:
        length = blocks.blocks[bid].length
        if bid in full:
            total += block_payload_bytes(length, None)
        else:
            bits = bits_per_block[bid] if isinstance(bits_per_block, Mapping) else bits_per_block
            total += block_payload_bytes(length, bits)
    return total


def full_sync_bytes(blocks: BlockIndex) -> int:
    return MESSAGE_HEADER_BYTES + len(blocks) * BLOCK_HEADER_BYTES + FLOAT_BYTES * blocks.num_params


def sparse_payload_bytes(k: int) -> int:
    return MESSAGE_HEADER_BYTES + SPARSE_ITEM_BYTES * k
