import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acesync.compression import quantize_block
from acesync.errors import ProtocolError
from acesync.tensor import init_model, partition_blocks
from acesync.wire import (CLOUD_SENDER, KIND_BLOCKS, KIND_SPARSE, BlockPayload, SparsePayload,
                          decode, model_payload)


@pytest.fixture(scope="module")
def index():
    return partition_blocks(init_model([20, 64, 5], 0), 64)


def test_header_layout(index):
    buf = BlockPayload(7, 3).to_bytes()
    assert len(buf) == 16
    assert int.from_bytes(buf[0:4], "little") == 7
    assert int.from_bytes(buf[4:8], "little") == 3


def test_quantized_bit_packing():
    idx = partition_blocks(init_model([2, 1], 0), 2)  # W has 2 elements
    qb = quantize_block([0.3, -0.4], 2, block_id=0)
    buf = BlockPayload(0, 0, quantized={0: qb}).to_bytes()
    # sign 0, level 10, sign 1, level 10 -> 0b010110 padded -> 0x58
    assert buf[-1] == 0x58
    assert len(buf) == 16 + 8 + 4 + 1
    _, _, kind, items = decode(buf, idx)
    assert kind == KIND_BLOCKS
    assert items[0][1] == pytest.approx([1 / 3, -1 / 3], rel=1e-7)


def test_model_payload_roundtrip(index):
    theta = init_model([20, 64, 5], 3).values
    payload = model_payload(CLOUD_SENDER, 5, theta, index)
    buf = payload.to_bytes()
    assert len(buf) == payload.nbytes == 6908
    msg = decode(buf, index)
    assert msg.sender == CLOUD_SENDER and msg.round == 5
    out = np.concatenate([v for _, v in msg.items])
    assert np.array_equal(out, theta.astype(np.float32).astype(np.float64))


@given(st.integers(0, 2**32 - 1), st.integers(2, 16))
@settings(max_examples=60, deadline=None)
def test_mixed_roundtrip_and_size(index, seed, bits):
    rng = np.random.default_rng(seed)
    ids = rng.permutation(len(index))[: rng.integers(0, len(index) + 1)]
    n_full = rng.integers(0, ids.size + 1)
    full, quant = {}, {}
    for j, bid in enumerate(ids):
        g = rng.standard_normal(index.blocks[bid].length)
        if j < n_full:
            full[int(bid)] = g
        else:
            quant[int(bid)] = quantize_block(g, bits, int(bid))
    payload = BlockPayload(2, 9, full, quant)
    buf = payload.to_bytes()
    assert len(buf) == payload.nbytes
    msg = decode(buf, index)
    got = dict(msg.items)
    assert tuple(got) == payload.block_ids
    for bid, expected in payload.blocks():
        tol = 1e-6 * max(1.0, float(np.abs(expected).max()))
        assert np.allclose(got[bid], expected, atol=tol, rtol=1e-6)


def test_sparse_roundtrip(index):
    p = SparsePayload(1, 2, np.array([0, 5, 1668]), np.array([0.5, -1.0, 2.0]))
    buf = p.to_bytes()
    assert len(buf) == p.nbytes == 16 + 24
    msg = decode(buf, index)
    assert msg.kind == KIND_SPARSE
    idx, vals = msg.items[0]
    assert idx.tolist() == [0, 5, 1668] and vals.tolist() == [0.5, -1.0, 2.0]


def test_protocol_errors(index):
    with pytest.raises(ProtocolError):
        decode(b"\x00" * 5, index)
    buf = BlockPayload(0, 0, {0: np.zeros(64)}).to_bytes()
    with pytest.raises(ProtocolError):
        decode(buf + b"\x00", index)
    bad = bytearray(buf)
    bad[16:20] = (999).to_bytes(4, "little")
    with pytest.raises(ProtocolError):
        decode(bytes(bad), index)
