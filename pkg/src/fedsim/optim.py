"""SGD, Adam and Adamax with bias correction, plus bit-exact state I/O.

Clients run SGD on weights and Adamax on thresholds; the server runs Adam on
weights and Adamax on thresholds, in ascent mode on pseudo-gradients.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import NumericsError

KINDS = ("sgd", "adam", "adamax")


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None  # first moment
    v: np.ndarray | None = None  # second moment (adam) / infinity norm (adamax)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


def step(state: OptimizerState, params: np.ndarray, grad: np.ndarray,
         ascent: bool = False, context: str = "") -> np.ndarray:
    """Apply one optimizer step; returns the updated parameter vector.

    ascent=True negates the gradient (the server maximizes its objective).
    Raises NumericsError on non-finite gradients, tagging the caller context.
    """
    grad = np.asarray(grad)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} != params {params.shape}")
    if not np.isfinite(grad).all():
        where = context or "optimizer step"
        raise NumericsError(f"non-finite gradient encountered at {where}")
    g = -grad if ascent else grad
    g = g.astype(params.dtype, copy=False)

    if state.kind == "sgd":
        state.step_count += 1
        return params - state.lr * g

    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    if state.kind == "adam":
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
        m_hat = state.m / (1.0 - state.beta1 ** t)
        v_hat = state.v / (1.0 - state.beta2 ** t)
        return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    # adamax: exponentially weighted infinity norm
    state.v = np.maximum(state.beta2 * state.v, np.abs(g))
    m_hat = state.m / (1.0 - state.beta1 ** t)
    return params - state.lr * m_hat / (state.v + state.eps)


def _pack_array(a: np.ndarray | None) -> bytes:
    if a is None:
        return struct.pack("<i", -1)
    raw = np.ascontiguousarray(a).tobytes()
    head = json.dumps({"dtype": a.dtype.str, "shape": list(a.shape)}).encode()
    return struct.pack("<i", len(head)) + head + struct.pack("<q", len(raw)) + raw


def _unpack_array(buf: bytes, off: int):
    (hlen,) = struct.unpack_from("<i", buf, off)
    off += 4
    if hlen == -1:
        return None, off
    head = json.loads(buf[off: off + hlen].decode())
    off += hlen
    (rlen,) = struct.unpack_from("<q", buf, off)
    off += 8
    a = np.frombuffer(buf[off: off + rlen], dtype=head["dtype"]).reshape(head["shape"])
    return a.copy(), off + rlen


def serialize_state(state: OptimizerState) -> bytes:
    """Bit-exact snapshot of the optimizer state (floats stored as hex)."""
    head = json.dumps({
        "kind": state.kind,
        "lr": state.lr.hex() if isinstance(state.lr, float) else float(state.lr).hex(),
        "beta1": float(state.beta1).hex(),
        "beta2": float(state.beta2).hex(),
        "eps": float(state.eps).hex(),
        "step_count": state.step_count,
    }).encode()
    return struct.pack("<i", len(head)) + head + _pack_array(state.m) + _pack_array(state.v)


def deserialize_state(buf: bytes) -> OptimizerState:
    (hlen,) = struct.unpack_from("<i", buf, 0)
    head = json.loads(buf[4: 4 + hlen].decode())
    m, off = _unpack_array(buf, 4 + hlen)
    v, off = _unpack_array(buf, off)
    return OptimizerState(
        kind=head["kind"],
        lr=float.fromhex(head["lr"]),
        beta1=float.fromhex(head["beta1"]),
        beta2=float.fromhex(head["beta2"]),
        eps=float.fromhex(head["eps"]),
        step_count=head["step_count"],
        m=m,
        v=v,
    )
