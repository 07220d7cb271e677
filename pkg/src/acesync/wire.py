"""Binary framing for uplink and downlink messages.

All integers and floats are little-endian.

=================  =====  ==========================================
field              bytes  content
=================  =====  ==========================================
message header     16     u32 sender, u32 round, u16 kind,
                          u16 reserved, u32 item count
block header       8      u32 block id, u8 mode (0 full, 1 quantized),
                          u8 bits (0 when full), u16 reserved
full payload       4*len  float32 per element
quantized payload  4 + ⌈len*(b+1)/8⌉
                          float32 scale (block l2 norm), then per
                          element one sign bit (1 = negative) followed
                          by the b-bit level, MSB first, zero padded
sparse item        8      u32 coordinate index, float32 value
=================  =====  ==========================================

Block lengths are not sent; both ends derive them from the shared
:class:`~acesync.tensor.BlockIndex`.

Inside the simulator messages travel as :class:`BlockPayload` and
:class:`SparsePayload` objects at float64; ``nbytes`` is the length their
``to_bytes`` encoding would have.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .compression import (BLOCK_HEADER_BYTES, MESSAGE_HEADER_BYTES, QuantizedBlock,
                          block_payload_bytes, dequantize_block, sparse_payload_bytes)
from .errors import ProtocolError
from .tensor import BlockIndex

KIND_BLOCKS = 0
KIND_SPARSE = 1
MODE_FULL = 0
MODE_QUANTIZED = 1
CLOUD_SENDER = 0xFFFFFFFF

_MSG = struct.Struct("<IIHHI")
_BLOCK = struct.Struct("<IBBH")


class Message(NamedTuple):
    sender: int
    round: int
    kind: int
    items: list  # (block_id, values) for blocks, (indices, values) for sparse


def _pack_levels(qb: QuantizedBlock) -> bytes:
    b = qb.bits
    shifts = np.arange(b - 1, -1, -1, dtype=np.uint32)
    level_bits = (qb.levels[:, None] >> shifts) & 1
    bits = np.concatenate([qb.negative[:, None].astype(np.uint32), level_bits], axis=1)
    return np.packbits(bits.astype(np.uint8).ravel()).tobytes()


def _unpack_levels(buf: bytes, length: int, b: int):
    raw = np.unpackbits(np.frombuffer(buf, dtype=np.uint8))[: length * (b + 1)]
    raw = raw.reshape(length, b + 1).astype(np.uint32)
    negative = raw[:, 0].astype(bool)
    weights = (1 << np.arange(b - 1, -1, -1)).astype(np.uint32)
    return negative, raw[:, 1:] @ weights


def encode_blocks(sender: int, round_: int, full: dict, quantized: dict) -> bytes:
    """Frame full-precision blocks ``{id: values}`` and ``{id: QuantizedBlock}``.

    Blocks are written in ascending block id.
    """
    ids = sorted(set(full) | set(quantized))
    if set(full) & set(quantized):
        raise ProtocolError("block sent both full and quantized")
    parts = [_MSG.pack(sender, round_, KIND_BLOCKS, 0, len(ids))]
    for bid in ids:
        if bid in full:
            parts.append(_BLOCK.pack(bid, MODE_FULL, 0, 0))
            parts.append(np.asarray(full[bid], dtype="<f4").tobytes())
        else:
            qb = quantized[bid]
            parts.append(_BLOCK.pack(bid, MODE_QUANTIZED, qb.bits, 0))
            parts.append(struct.pack("<f", qb.scale))
            parts.append(_pack_levels(qb))
    return b"".join(parts)


def encode_sparse(sender: int, round_: int, indices, values) -> bytes:
    indices = np.asarray(indices, dtype="<u4")
    values = np.asarray(values, dtype="<f4")
    body = np.empty(indices.size, dtype=[("i", "<u4"), ("v", "<f4")])
    body["i"] = indices
    body["v"] = values
    return _MSG.pack(sender, round_, KIND_SPARSE, 0, indices.size) + body.tobytes()


def decode(buf: bytes, index: BlockIndex) -> Message:
    if len(buf) < MESSAGE_HEADER_BYTES:
        raise ProtocolError("truncated message header")
    sender, round_, kind, _, count = _MSG.unpack_from(buf, 0)
    pos = MESSAGE_HEADER_BYTES
    if kind == KIND_SPARSE:
        body = np.frombuffer(buf, dtype=[("i", "<u4"), ("v", "<f4")], count=count, offset=pos)
        if pos + body.nbytes != len(buf):
            raise ProtocolError("sparse message length mismatch")
        return Message(sender, round_, kind, [(body["i"].astype(np.int64), body["v"].astype(np.float64))])
    if kind != KIND_BLOCKS:
        raise ProtocolError(f"unknown message kind {kind}")
    items = []
    for _ in range(count):
        bid, mode, bits, _ = _BLOCK.unpack_from(buf, pos)
        pos += BLOCK_HEADER_BYTES
        if bid >= len(index):
            raise ProtocolError(f"unknown block id {bid}")
        length = index.blocks[bid].length
        if mode == MODE_FULL:
            values = np.frombuffer(buf, dtype="<f4", count=length, offset=pos).astype(np.float64)
            pos += 4 * length
        elif mode == MODE_QUANTIZED:
            (scale,) = struct.unpack_from("<f", buf, pos)
            pos += 4
            nbytes = (length * (bits + 1) + 7) // 8
            negative, levels = _unpack_levels(buf[pos:pos + nbytes], length, bits)
            pos += nbytes
            values = dequantize_block(QuantizedBlock(bid, negative, levels, float(scale), bits))
        else:
            raise ProtocolError(f"unknown block mode {mode}")
        items.append((bid, values))
    if pos != len(buf):
        raise ProtocolError("trailing bytes after last block")
    return Message(sender, round_, kind, items)


@dataclass(frozen=True)
class BlockPayload:
    sender: int
    round: int
    full: dict = field(default_factory=dict)
    quantized: dict = field(default_factory=dict)

    @property
    def block_ids(self) -> tuple:
        return tuple(sorted(set(self.full) | set(self.quantized)))

    @property
    def nbytes(self) -> int:
        total = MESSAGE_HEADER_BYTES
        for values in self.full.values():
            total += block_payload_bytes(len(values), None)
        for qb in self.quantized.values():
            total += block_payload_bytes(qb.levels.size, qb.bits)
        return total

    def blocks(self):
        """(block_id, float64 values) in ascending id."""
        for bid in self.block_ids:
            if bid in self.full:
                yield bid, self.full[bid]
            else:
                yield bid, dequantize_block(self.quantized[bid])

    def to_bytes(self) -> bytes:
        return encode_blocks(self.sender, self.round, self.full, self.quantized)


@dataclass(frozen=True)
class SparsePayload:
    sender: int
    round: int
    indices: np.ndarray
    values: np.ndarray

    @property
    def nbytes(self) -> int:
        return sparse_payload_bytes(int(self.indices.size))

    def to_bytes(self) -> bytes:
        return encode_sparse(self.sender, self.round, self.indices, self.values)


def model_payload(sender: int, round_: int, values, index: BlockIndex) -> BlockPayload:
    """Every block of a parameter vector at full precision."""
    values = np.asarray(values, dtype=np.float64)
    return BlockPayload(sender, round_, {b.block_id: values[index.slice(b.block_id)].copy()
                                         for b in index.blocks})
