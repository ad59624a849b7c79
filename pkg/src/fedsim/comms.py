"""Wire encoding for all message kinds and exact byte accounting.

All multi-byte fields are little-endian. Floats travel as 32 bits; gate
bitmasks pack one bit per group, LSB-first within each byte. The layouts:

  header          round u32 | client_id u32 | strategy u8 | kind u8   (10 bytes)
  dense           header | n u32 | n * f32
  sparse          header | n_groups u32 | ceil(G/8) bitmask bytes |
                  surviving-group f32 weights | v-flag u8 | [G * f32 v]
  submodel        header | n_units u32 | ceil(U/8) unit bitmask | retained f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError

HEADER_FMT = "<IIBB"
HEADER_LEN = struct.calcsize(HEADER_FMT)

STRATEGY_TAGS = {
    "fedavg": 0, "fedprox": 1, "laplace": 2, "fedsparse": 3,
    "fedl1": 4, "feddrop": 5, "median": 6, "mog": 7,
}
KIND_DENSE, KIND_SPARSE, KIND_SUBMODEL = 0, 1, 2


@dataclass(frozen=True)
class Header:
    round_idx: int
    client_id: int
    strategy_tag: int
    payload_kind: int

    def pack(self) -> bytes:
        return struct.pack(HEADER_FMT, self.round_idx, self.client_id,
                           self.strategy_tag, self.payload_kind)


def _unpack_header(data: bytes) -> Header:
    if len(data) < HEADER_LEN:
        raise ProtocolError("message shorter than its header")
    return Header(*struct.unpack_from(HEADER_FMT, data, 0))


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bits(raw: bytes, n: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(raw, np.uint8), count=n,
                         bitorder="little").astype(bool)


def encode_dense(header: Header, params: np.ndarray) -> bytes:
    p = np.ascontiguousarray(params, dtype="<f4")
    return header.pack() + struct.pack("<I", p.size) + p.tobytes()


def decode_dense(data: bytes):
    header = _unpack_header(data)
    (n,) = struct.unpack_from("<I", data, HEADER_LEN)
    body = data[HEADER_LEN + 4:]
    if len(body) != 4 * n:
        raise ProtocolError(f"dense payload holds {len(body)} bytes, "
                            f"expected {4 * n}")
    return header, np.frombuffer(body, "<f4").copy()


def encode_sparse_update(header: Header, bitmask: np.ndarray,
                         weights: np.ndarray, group_sizes: np.ndarray,
                         v=None) -> bytes:
    """Bitmask over groups plus the surviving groups' weights, optional v block."""
    bitmask = np.asarray(bitmask, dtype=bool)
    group_sizes = np.asarray(group_sizes, dtype=np.int64)
    if bitmask.shape != group_sizes.shape:
        raise ProtocolError("bitmask length differs from the group-size table")
    expected = int(group_sizes[bitmask].sum())
    w = np.ascontiguousarray(weights, dtype="<f4")
    if w.size != expected:
        raise ProtocolError(
            f"sparse payload carries {w.size} weights but the set bits "
            f"cover {expected} coordinates"
        )
    out = [header.pack(), struct.pack("<I", bitmask.size), _pack_bits(bitmask),
           w.tobytes()]
    if v is None:
        out.append(b"\x00")
    else:
        vv = np.ascontiguousarray(v, dtype="<f4")
        if vv.size != bitmask.size:
            raise ProtocolError("v block must hold one value per group")
        out.append(b"\x01")
        out.append(vv.tobytes())
    return b"".join(out)


def decode_sparse_update(data: bytes, group_sizes: np.ndarray):
    header = _unpack_header(data)
    group_sizes = np.asarray(group_sizes, dtype=np.int64)
    (n_groups,) = struct.unpack_from("<I", data, HEADER_LEN)
    if n_groups != group_sizes.size:
        raise ProtocolError(f"message announces {n_groups} groups, decoder "
                            f"expects {group_sizes.size}")
    off = HEADER_LEN + 4
    nmask = (n_groups + 7) // 8
    bitmask = _unpack_bits(data[off: off + nmask], n_groups)
    off += nmask
    n_w = int(group_sizes[bitmask].sum())
    if len(data) < off + 4 * n_w + 1:
        raise ProtocolError("sparse payload truncated")
    weights = np.frombuffer(data, "<f4", count=n_w, offset=off)
    off += 4 * n_w
    flag = data[off]
    off += 1
    v = None
    if flag == 1:
        if len(data) < off + 4 * n_groups:
            raise ProtocolError("v block truncated")
        v = np.frombuffer(data, "<f4", count=n_groups, offset=off).copy()
        off += 4 * n_groups
    if off != len(data):
        raise ProtocolError("trailing bytes after sparse payload")
    return header, bitmask, weights.copy(), v


def sparse_message_length(n_groups: int, n_weights: int, with_v: bool) -> int:
    """Deterministic byte length from (G, surviving weight count)."""
    return (HEADER_LEN + 4 + (n_groups + 7) // 8 + 4 * n_weights + 1
            + (4 * n_groups if with_v else 0))


def encode_submodel(header: Header, unit_mask: np.ndarray,
                    sub_params: np.ndarray) -> bytes:
    unit_mask = np.asarray(unit_mask, dtype=bool)
    if not unit_mask.any():
        raise ProtocolError("submodel with every unit dropped is rejected")
    p = np.ascontiguousarray(sub_params, dtype="<f4")
    return (header.pack() + struct.pack("<I", unit_mask.size)
            + _pack_bits(unit_mask) + p.tobytes())


def decode_submodel(data: bytes):
    header = _unpack_header(data)
    (n_units,) = struct.unpack_from("<I", data, HEADER_LEN)
    off = HEADER_LEN + 4
    nmask = (n_units + 7) // 8
    unit_mask = _unpack_bits(data[off: off + nmask], n_units)
    off += nmask
    body = data[off:]
    if len(body) % 4:
        raise ProtocolError("submodel payload is not float-aligned")
    return header, unit_mask, np.frombuffer(body, "<f4").copy()


@dataclass
class CostLedger:
    """Exact per-round and cumulative byte counts in both directions."""

    up_by_round: dict = field(default_factory=dict)
    down_by_round: dict = field(default_factory=dict)
    per_client_up: dict = field(default_factory=dict)
    per_client_down: dict = field(default_factory=dict)
    bytes_up_total: int = 0
    bytes_down_total: int = 0

    def record_dispatch(self, round_idx: int, client_id: int, message: bytes):
        n = len(message)
        self.down_by_round[round_idx] = self.down_by_round.get(round_idx, 0) + n
        self.per_client_down[client_id] = self.per_client_down.get(client_id, 0) + n
        self.bytes_down_total += n

    def record_upload(self, round_idx: int, client_id: int, message: bytes):
        n = len(message)
        self.up_by_round[round_idx] = self.up_by_round.get(round_idx, 0) + n
        self.per_client_up[client_id] = self.per_client_up.get(client_id, 0) + n
        self.bytes_up_total += n
