"""Server-side aggregation: the M-step side of every algorithm.

Closed-form averaging and coordinate-wise medians, first-order updates on
difference pseudo-gradients, the sparse-gate server round with pruning, and
the mixture-of-Gaussians ensemble update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gates
from .clients import ClientUpdate
from .errors import DimensionError, ProtocolError
from .nn import GroupedParams, group_norms, submodel_indices
from .optim import OptimizerState, step


@dataclass
class ServerState:
    """Mutable global state; exactly one aggregation mode is active per run."""

    w: GroupedParams
    strategy: str
    opt_w: OptimizerState | None = None
    v: np.ndarray | None = None  # float32 threshold pre-activations, per group
    opt_v: OptimizerState | None = None
    temperature: float = 0.001
    prune_epsilon: float = 0.1
    ensemble: list = field(default_factory=list)
    mog_lambda: float = 1.0

    def theta(self) -> np.ndarray:
        """Current inclusion probabilities from live weight norms and thresholds."""
        if self.v is None:
            raise ValueError("theta is only defined for the fedsparse strategy")
        return gates.theta_from_magnitude(
            group_norms(self.w), gates.softplus(self.v), self.temperature)

    def prune_mask(self) -> np.ndarray:
        return self.theta() > self.prune_epsilon

    def apply_prune(self):
        """Zero the weights of every group with theta <= epsilon (masking only)."""
        keep = self.prune_mask()
        mult = self.w.layout.expand_mask(keep.astype(np.float64))
        self.w.flat = (self.w.flat * mult.astype(self.w.flat.dtype))
        return keep


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise DimensionError("no updates to aggregate")
    arrs = [np.asarray(u) for u in updates]
    length = arrs[0].shape
    for a in arrs:
        if a.shape != length:
            raise DimensionError("updates have mismatched lengths")
    return np.stack(arrs)


def aggregate_average(updates) -> np.ndarray:
    """Coordinate-wise mean, accumulated in float64, returned in input dtype."""
    stack = _stack(updates)
    return np.mean(stack, axis=0, dtype=np.float64).astype(stack.dtype)


def aggregate_median(updates) -> np.ndarray:
    """Coordinate-wise median; even counts average the two middle values."""
    stack = _stack(updates)
    return np.median(stack.astype(np.float64), axis=0).astype(stack.dtype)


def server_step_difference(w: np.ndarray, updates, opt: OptimizerState,
                           context: str = "") -> np.ndarray:
    """Ascent step on the cohort-mean pseudo-gradient (1/B) sum (w_s - w).

    The SGD path computes the convex combination (1-lr)*w + lr*mean directly,
    so lr = 1 reproduces plain averaging exactly.
    """
    stack = _stack(updates)
    mean = np.mean(stack.astype(np.float64), axis=0)
    if opt.kind == "sgd":
        opt.step_count += 1
        out = (1.0 - opt.lr) * w.astype(np.float64) + opt.lr * mean
        return out.astype(w.dtype)
    pseudo_grad = (mean - w.astype(np.float64)).astype(w.dtype)
    return step(opt, w, pseudo_grad, ascent=True, context=context)


def fedsparse_server_round(state: ServerState, updates: list[ClientUpdate],
                           context: str = "") -> ServerState:
    """Accumulate Alg-style pseudo-gradients, step Adam/Adamax, then prune.

    For each update: grad_w += z_s * (w_hat_s - w) coordinate-wise and
    grad_v += -(z_s (1 - theta) - (1 - z_s) theta) * sigmoid(v) / T per group,
    both averaged over the cohort and applied in ascent mode.
    """
    if not updates:
        raise DimensionError("fedsparse round received no updates")
    lay = state.w.layout
    G = len(lay.groups)
    theta = state.theta()
    sig_v = gates.sigmoid(np.asarray(state.v, dtype=np.float64))
    w64 = state.w.flat.astype(np.float64)

    grad_w = np.zeros(lay.n_params)
    grad_v = np.zeros(G)
    for upd in updates:
        if upd.tag != "sparse" or upd.bitmask is None:
            raise ProtocolError("fedsparse server expects sparse updates")
        if upd.bitmask.shape != (G,):
            raise ProtocolError(
                f"update bitmask has {upd.bitmask.size} bits, model has {G} groups"
            )
        z = upd.bitmask.astype(np.float64)
        mult = lay.expand_mask(z)
        grad_w += mult * (upd.weights_masked.astype(np.float64) - w64)
        grad_v += -(z * (1.0 - theta) - (1.0 - z) * theta) * sig_v \
            / state.temperature
    grad_w /= len(updates)
    grad_v /= len(updates)

    state.w.flat = step(state.opt_w, state.w.flat,
                        grad_w.astype(state.w.flat.dtype), ascent=True,
                        context=context)
    state.v = step(state.opt_v, state.v, grad_v.astype(state.v.dtype),
                   ascent=True, context=context)
    state.apply_prune()
    return state


def stationary_weighted_average(w: GroupedParams, weight_vectors, pis):
    """Closed-form stationary point: probability-weighted mean of the weights.

    w_j = sum_s pi_s[g(j)] w_sj / sum_s pi_s[g(j)] for grouped coordinates
    (plain mean for ungrouped ones), theta = mean of the local probabilities.
    Coordinates whose probability mass is zero keep their current value.
    """
    lay = w.layout
    if len(weight_vectors) != len(pis) or not weight_vectors:
        raise DimensionError("need one probability vector per update")
    num = np.zeros(lay.n_params)
    den = np.zeros(lay.n_params)
    for flat, pi in zip(weight_vectors, pis):
        mult = lay.expand_mask(np.asarray(pi, dtype=np.float64))
        num += mult * np.asarray(flat, dtype=np.float64)
        den += mult
    out = w.flat.astype(np.float64).copy()
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    theta = np.mean(np.stack([np.asarray(p, dtype=np.float64) for p in pis]),
                    axis=0)
    return out.astype(w.flat.dtype), theta


def mog_responsibilities(w_s: np.ndarray, ensemble, lam: float) -> np.ndarray:
    """Posterior over mixture components, r_k proportional to exp(-lam/2 d_k^2)."""
    if lam <= 0:
        raise ValueError("mixture precision lambda must be positive")
    if len(ensemble) == 0:
        raise DimensionError("empty ensemble")
    ws = np.asarray(w_s, dtype=np.float64)
    logits = np.array([
        -0.5 * lam * float(np.sum((ws - np.asarray(c, dtype=np.float64)) ** 2))
        for c in ensemble
    ])
    logits -= logits.max()
    expd = np.exp(logits)
    return expd / expd.sum()


def mog_update(ensemble, updates, lam: float):
    """Responsibility-weighted means; starved components stay where they are."""
    stack = _stack(updates).astype(np.float64)
    resp = np.stack([mog_responsibilities(u, ensemble, lam) for u in stack])
    new = []
    for k, comp in enumerate(ensemble):
        total = resp[:, k].sum()
        if total < 1e-12:
            new.append(np.asarray(comp).copy())
            continue
        centroid = (resp[:, k][:, None] * stack).sum(axis=0) / total
        new.append(centroid.astype(np.asarray(comp).dtype))
    return new


def feddrop_dispatch(w: GroupedParams, drop_rate: float,
                     rng: np.random.Generator, client_ids,
                     max_retries: int = 20):
    """Per-client independent retain masks over hidden units plus the slices."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError("drop_rate must lie in [0, 1)")
    lay = w.layout
    h = w.spec.hidden_dim
    out = {}
    for cid in client_ids:
        for _ in range(max_retries):
            mask = rng.random(h) >= drop_rate
            if mask.any():
                break
        else:
            raise ProtocolError(
                f"client {cid}: every hidden unit dropped after "
                f"{max_retries} resamples; lower the drop rate"
            )
        idx = submodel_indices(lay, mask)
        out[cid] = (mask, w.flat[idx].copy())
    return out


def feddrop_merge(w: GroupedParams, updates: list[ClientUpdate]) -> np.ndarray:
    """Average every coordinate over the clients whose mask included it.

    Coordinates absent from all masks keep their previous value bit-exactly.
    """
    lay = w.layout
    total = np.zeros(lay.n_params)
    count = np.zeros(lay.n_params, np.int64)
    for upd in updates:
        if upd.tag != "submodel":
            raise ProtocolError("feddrop merge expects submodel updates")
        idx = submodel_indices(lay, upd.unit_mask)
        if idx.size != upd.sub_params.size:
            raise ProtocolError("submodel payload does not match its unit mask")
        total[idx] += upd.sub_params.astype(np.float64)
        count[idx] += 1
    out = w.flat.copy()
    covered = count > 0
    out[covered] = (total[covered] / count[covered]).astype(w.flat.dtype)
    return out
