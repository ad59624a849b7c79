"""Wire formats: exact byte lengths, round trips, ledger accounting."""

import numpy as np
import pytest

from fedsim.comms import (
    HEADER_LEN,
    CostLedger,
    Header,
    decode_dense,
    decode_sparse_update,
    decode_submodel,
    encode_dense,
    encode_sparse_update,
    encode_submodel,
    sparse_message_length,
)
from fedsim.errors import ProtocolError

HDR = Header(round_idx=3, client_id=17, strategy_tag=3, payload_kind=1)


def test_header_is_ten_bytes():
    assert HEADER_LEN == 10
    assert len(HDR.pack()) == 10


def test_sparse_example_byte_count():
    # 8 groups of size 4, three of them active, no v block:
    # 10 header + 4 group count + 1 bitmask + 48 weights + 1 flag = 64
    sizes = np.full(8, 4)
    bits = np.zeros(8, bool)
    bits[[0, 3, 6]] = True
    weights = np.arange(12, dtype=np.float32)
    msg = encode_sparse_update(HDR, bits, weights, sizes)
    assert len(msg) == 64
    assert len(msg) == sparse_message_length(8, 12, with_v=False)


def test_sparse_all_zero_bitmask():
    sizes = np.full(8, 4)
    msg = encode_sparse_update(HDR, np.zeros(8, bool), np.empty(0, np.float32),
                               sizes)
    assert len(msg) == 10 + 4 + 1 + 0 + 1


def test_sparse_round_trip_with_v():
    sizes = np.array([2, 3, 1, 4])
    bits = np.array([True, False, True, True])
    weights = np.arange(7, dtype=np.float32) * 0.5
    v = np.array([-0.1, 0.2, 0.0, 1.5], np.float32)
    msg = encode_sparse_update(HDR, bits, weights, sizes, v=v)
    assert len(msg) == sparse_message_length(4, 7, with_v=True)
    header, bits2, w2, v2 = decode_sparse_update(msg, sizes)
    assert header == HDR
    assert np.array_equal(bits, bits2)
    assert np.array_equal(weights, w2)
    assert np.array_equal(v, v2)


def test_sparse_round_trip_without_v():
    sizes = np.array([2, 2])
    msg = encode_sparse_update(HDR, np.array([False, True]),
                               np.array([1.0, 2.0], np.float32), sizes)
    _, bits, w, v = decode_sparse_update(msg, sizes)
    assert v is None and np.array_equal(w, [1.0, 2.0])
    assert bits.tolist() == [False, True]


def test_sparse_weight_count_mismatch():
    sizes = np.array([2, 2])
    with pytest.raises(ProtocolError, match="cover"):
        encode_sparse_update(HDR, np.array([True, False]),
                             np.zeros(3, np.float32), sizes)


def test_sparse_decode_validates_group_table():
    sizes = np.array([2, 2])
    msg = encode_sparse_update(HDR, np.array([True, True]),
                               np.zeros(4, np.float32), sizes)
    with pytest.raises(ProtocolError, match="groups"):
        decode_sparse_update(msg, np.array([2, 2, 2]))
    with pytest.raises(ProtocolError, match="truncated"):
        decode_sparse_update(msg[:-3], sizes)


def test_dense_byte_count_and_round_trip():
    params = np.linspace(-1, 1, 100).astype(np.float32)
    msg = encode_dense(HDR, params)
    assert len(msg) == 414  # 10 + 4 + 400
    header, out = decode_dense(msg)
    assert header == HDR
    assert np.array_equal(out, params)


def test_dense_truncation_detected():
    msg = encode_dense(HDR, np.zeros(10, np.float32))
    with pytest.raises(ProtocolError):
        decode_dense(msg[:-1])


def test_submodel_round_trip_and_empty_rejection():
    mask = np.array([True, False, True, False])
    sub = np.array([1.0, 2.0, 3.0], np.float32)
    msg = encode_submodel(HDR, mask, sub)
    assert len(msg) == 10 + 4 + 1 + 12
    header, mask2, sub2 = decode_submodel(msg)
    assert header == HDR
    assert np.array_equal(mask, mask2)
    assert np.array_equal(sub, sub2)
    with pytest.raises(ProtocolError, match="rejected"):
        encode_submodel(HDR, np.zeros(4, bool), np.empty(0, np.float32))


def test_bitmask_packing_is_lsb_first():
    sizes = np.ones(9, np.int64)
    bits = np.zeros(9, bool)
    bits[0] = bits[8] = True
    msg = encode_sparse_update(HDR, bits, np.zeros(2, np.float32), sizes)
    mask_bytes = msg[HEADER_LEN + 4: HEADER_LEN + 4 + 2]
    assert mask_bytes == b"\x01\x01"


def test_ledger_counts_every_encoded_byte():
    ledger = CostLedger()
    sizes = np.full(4, 3)
    sent = []
    for r in (1, 1, 2):
        for cid in (0, 1, 2):
            hdr = Header(r, cid, 0, 0)
            down = encode_dense(hdr, np.zeros(25, np.float32))
            up = encode_sparse_update(hdr, np.array([True, True, False, False]),
                                      np.zeros(6, np.float32), sizes)
            ledger.record_dispatch(r, cid, down)
            ledger.record_upload(r, cid, up)
            sent.append((len(down), len(up)))
    assert ledger.bytes_down_total == sum(d for d, _ in sent)
    assert ledger.bytes_up_total == sum(u for _, u in sent)
    assert ledger.down_by_round[1] == 6 * (10 + 4 + 100)
    assert ledger.per_client_up[0] == 3 * sent[0][1]  # client 0 in all 3 rounds


def test_fedavg_symmetry_accounting():
    # dense both ways: bytes_down == bytes_up for a cohort of 10
    ledger = CostLedger()
    n = 57
    for cid in range(10):
        hdr = Header(1, cid, 0, 0)
        msg = encode_dense(hdr, np.zeros(n, np.float32))
        ledger.record_dispatch(1, cid, msg)
        ledger.record_upload(1, cid, msg)
    assert ledger.bytes_down_total == ledger.bytes_up_total \
        == 10 * (HEADER_LEN + 4 + 4 * n)


def test_sparse_weight_payload_never_exceeds_dense():
    # payload monotonicity: surviving floats <= full vector, equality only
    # with every group switched on
    rng = np.random.default_rng(0)
    sizes = rng.integers(1, 6, size=12)
    n_total = int(sizes.sum())
    for trial in range(20):
        bits = rng.random(12) < 0.7
        nnz = int(sizes[bits].sum())
        assert nnz <= n_total
        if bits.all():
            assert nnz == n_total
        else:
            assert nnz < n_total
