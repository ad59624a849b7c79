"""Local-training strategies: the E-step side of every algorithm.

Each client starts from the dispatched global state, runs E epochs of
minibatch updates on its shard, and returns a ClientUpdate. Gradient noise
comes only from named per-client streams, so clients can run concurrently
in any order without changing results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gates
from .data import ShardDataset
from .errors import DimensionError
from .nn import Batch, GroupedParams, ModelSpec, backward, group_norms, layout_for
from .optim import OptimizerState, step
from .rng import open_uniform


@dataclass
class ClientConfig:
    epochs: int = 1
    batch_size: int = 64
    lr_weights: float = 0.05
    lr_thresholds: float = 1e-3
    lambda_prox: float = 0.0
    lambda_laplace: float = 0.0
    lambda0: float = 0.0
    lambda_drift: float = 0.0
    ce_scale: float = 1e-4
    l1_strength: float = 0.0
    drop_rate: float = 0.0
    temperature: float = 0.001

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        for name in ("lambda_prox", "lambda_laplace", "lambda0", "lambda_drift",
                     "l1_strength"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.ce_scale <= 1.0:
            raise ValueError("ce_scale must lie in [0, 1]")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError("drop_rate must lie in [0, 1)")


@dataclass
class ClientUpdate:
    """Upload message content, kept in structured form until encoding."""

    tag: str  # dense | sparse | submodel
    client_id: int
    n_steps: int
    params: np.ndarray | None = None          # dense: trained flat vector
    bitmask: np.ndarray | None = None         # sparse: bool per gated group
    weights_masked: np.ndarray | None = None  # sparse: full vector, pruned zeroed
    v: np.ndarray | None = None               # sparse: per-group thresholds
    pi: np.ndarray | None = None              # sparse: end-of-round probabilities
    unit_mask: np.ndarray | None = None       # submodel
    sub_params: np.ndarray | None = None      # submodel


def _batches(shard: ShardDataset, cfg: ClientConfig, rng: np.random.Generator):
    n = len(shard.train_y)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start: start + cfg.batch_size]
            yield Batch(shard.train_x[idx], shard.train_y[idx])


def _run_local_sgd(w: GroupedParams, shard, cfg, rng, grad_hook=None,
                   context: str = ""):
    """Shared minibatch-SGD loop; grad_hook may add a penalty gradient."""
    flat = w.flat.copy()
    opt = OptimizerState("sgd", lr=cfg.lr_weights)
    steps = 0
    for batch in _batches(shard, cfg, rng):
        g = backward(GroupedParams(w.spec, flat), batch)
        if grad_hook is not None:
            g = grad_hook(flat, g)
        flat = step(opt, flat, g, context=f"{context} step {steps}")
        steps += 1
    return flat, steps


def client_fedavg(w: GroupedParams, shard, cfg, rng, client_id: int = 0,
                  context: str = "") -> ClientUpdate:
    """Plain local SGD from the dispatched weights."""
    flat, steps = _run_local_sgd(w, shard, cfg, rng, context=context)
    return ClientUpdate("dense", client_id, steps, params=flat)


def client_fedprox(w: GroupedParams, shard, cfg, rng, client_id: int = 0,
                   context: str = "") -> ClientUpdate:
    """Local SGD with a proximal pull lambda_prox * (w_s - w) toward the global."""
    w0 = w.flat.copy()
    lam = cfg.lambda_prox

    def hook(flat, g):
        if lam == 0.0:
            return g
        return g + (lam * (flat - w0)).astype(g.dtype)

    flat, steps = _run_local_sgd(w, shard, cfg, rng, hook, context)
    return ClientUpdate("dense", client_id, steps, params=flat)


def client_laplace(w: GroupedParams, shard, cfg, rng, client_id: int = 0,
                   context: str = "") -> ClientUpdate:
    """Local SGD under a Laplace prior: subgradient lambda * sign(w_s - w)."""
    w0 = w.flat.copy()
    lam = cfg.lambda_laplace

    def hook(flat, g):
        if lam == 0.0:
            return g
        return g + (lam * np.sign(flat - w0)).astype(g.dtype)

    flat, steps = _run_local_sgd(w, shard, cfg, rng, hook, context)
    return ClientUpdate("dense", client_id, steps, params=flat)


def client_fedl1(w: GroupedParams, shard, cfg, rng, client_id: int = 0,
                 context: str = "") -> ClientUpdate:
    """Group-L1 regularized SGD with magnitude thresholding before upload.

    Groups whose L2 norm ends at or below l1_strength are zeroed and their
    bit cleared; the surviving groups upload unshrunk weights.
    """
    lay = w.layout
    lam = cfg.l1_strength
    spec = w.spec

    def hook(flat, g):
        if lam == 0.0:
            return g
        norms = group_norms(GroupedParams(spec, flat))
        scale = np.zeros(len(lay.groups))
        nz = norms > 0
        scale[nz] = lam / norms[nz]
        mult = np.zeros(lay.n_params)
        grouped = lay.coord_group >= 0
        mult[grouped] = scale[lay.coord_group[grouped]]
        return g + (mult * flat).astype(g.dtype)

    flat, steps = _run_local_sgd(w, shard, cfg, rng, hook, context)
    norms = group_norms(GroupedParams(spec, flat))
    keep = norms > lam  # prune at equality
    masked = flat * lay.expand_mask(keep.astype(np.float64)).astype(flat.dtype)
    return ClientUpdate("sparse", client_id, steps, bitmask=keep,
                        weights_masked=masked)


def _fedsparse_batch_grads(spec: ModelSpec, flat, w0, v_s, theta_logit, batch,
                           cfg: ClientConfig, u: np.ndarray,
                           include_data: bool = True):
    """Gradients of the relaxed local objective for one minibatch.

    Returns (grad_w, grad_v). Weight gradients see only the data term (through
    the sampled gates) and the drift term; the gate penalties reach the
    thresholds alone because weight norms are treated as constants there.
    """
    lay = layout_for(spec)
    T = cfg.temperature
    norms = group_norms(GroupedParams(spec, flat))
    tau_s = gates.softplus(v_s)
    log_alpha = (norms - tau_s) / T
    pi = gates.sigmoid(log_alpha)

    noise = gates.logit(u) + log_alpha
    s = gates.sigmoid(noise / gates.HC_BETA)
    stretched = s * (gates.HC_ZETA - gates.HC_GAMMA) + gates.HC_GAMMA
    z = np.clip(stretched, 0.0, 1.0)

    if include_data:
        grad_w, grad_mask = backward(GroupedParams(spec, flat), batch, mask=z,
                                     return_mask_grad=True)
    else:
        grad_w = np.zeros_like(flat)
        grad_mask = np.zeros(len(lay.groups))

    dtau_dv = gates.sigmoid(v_s)
    dla_dv = -dtau_dv / T
    if cfg.lambda_drift > 0.0:
        diff = flat.astype(np.float64) - w0.astype(np.float64)
        pi_coord = lay.expand_mask(pi)
        grad_w = grad_w + (cfg.lambda_drift * pi_coord * diff).astype(grad_w.dtype)
        grouped = lay.coord_group >= 0
        sq_dist = np.bincount(lay.coord_group[grouped],
                              weights=(diff ** 2)[grouped],
                              minlength=len(lay.groups))
        drift_dpi = 0.5 * cfg.lambda_drift * sq_dist
    else:
        drift_dpi = 0.0

    # penalty gradient reaches v through pi only (weight norms detached)
    dpi_dv = pi * (1.0 - pi) * dla_dv
    pen_dpi = cfg.lambda0 + drift_dpi - cfg.ce_scale * theta_logit
    frac = (stretched > 0.0) & (stretched < 1.0)
    dz_dv = np.where(
        frac, (gates.HC_ZETA - gates.HC_GAMMA) * s * (1.0 - s) / gates.HC_BETA, 0.0
    ) * dla_dv
    grad_v = grad_mask * dz_dv + dpi_dv * pen_dpi
    return grad_w, grad_v, pi


def client_fedsparse(w: GroupedParams, v: np.ndarray, shard, cfg, rng,
                     gate_rng, client_id: int = 0,
                     context: str = "") -> ClientUpdate:
    """Sparse local training: SGD on weights, Adamax on thresholds.

    The client initializes its posterior at the dispatched prior (w_s = w,
    v_s = v), trains with fresh relaxed-gate samples each minibatch, then
    draws exact binary gates at zero temperature and uploads only the
    surviving groups' weights together with the bitmask and thresholds.
    """
    spec = w.spec
    lay = w.layout
    G = len(lay.groups)
    if np.asarray(v).shape != (G,):
        raise DimensionError(f"threshold vector has {np.asarray(v).size} "
                             f"entries, model has {G} groups")
    T = cfg.temperature
    theta = gates.theta_from_magnitude(group_norms(w), gates.softplus(v), T)
    theta_logit = gates.logit(
        np.clip(theta, gates.PROB_CLIP, 1.0 - gates.PROB_CLIP))

    flat = w.flat.copy()
    w0 = w.flat.copy()
    v_s = np.asarray(v, dtype=np.float64).copy()
    opt_w = OptimizerState("sgd", lr=cfg.lr_weights)
    opt_v = OptimizerState("adamax", lr=cfg.lr_thresholds)
    steps = 0
    for batch in _batches(shard, cfg, rng):
        u = open_uniform(gate_rng, G)
        grad_w, grad_v, _ = _fedsparse_batch_grads(
            spec, flat, w0, v_s, theta_logit, batch, cfg, u)
        tag = f"{context} step {steps}"
        flat = step(opt_w, flat, grad_w, context=tag)
        v_s = step(opt_v, v_s, grad_v, context=tag)
        steps += 1

    norms = group_norms(GroupedParams(spec, flat))
    log_alpha = (norms - gates.softplus(v_s)) / T
    pi = gates.sigmoid(log_alpha)
    u = open_uniform(gate_rng, G)
    z = gates.hard_concrete_sample(
        gates.HardConcreteParams(log_alpha=log_alpha), u, zero_temperature=True)
    keep = z > 0
    masked = flat * lay.expand_mask(z).astype(flat.dtype)
    return ClientUpdate("sparse", client_id, steps, bitmask=keep,
                        weights_masked=masked, v=v_s, pi=pi)


def client_feddrop(sub_w: GroupedParams, unit_mask: np.ndarray, shard, cfg, rng,
                   client_id: int = 0, context: str = "") -> ClientUpdate:
    """Standard SGD on the dispatched subnetwork; returns the trained slice."""
    unit_mask = np.asarray(unit_mask, dtype=bool)
    if not unit_mask.any():
        raise DimensionError("submodel with all hidden units dropped is rejected")
    flat, steps = _run_local_sgd(sub_w, shard, cfg, rng, context=context)
    return ClientUpdate("submodel", client_id, steps, unit_mask=unit_mask,
                        sub_params=flat)
