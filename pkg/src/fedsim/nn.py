"""Dense-tensor models with grouped parameters and manual backpropagation.

Two model kinds are supported: multinomial logistic regression and a
one-hidden-layer ReLU MLP. Parameters live in a single flat vector; a group
map assigns prunable structures (hidden units or input features) to index
sets so gates can switch whole structures on and off. Group masking is
implemented by scaling the flat vector, which makes the masked forward pass
exactly equal to a forward pass on rescaled parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import DimensionError


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; hashable so layouts can be cached."""

    kind: str  # "logreg" | "mlp"
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    grouping: str = ""  # "" picks the default for the kind
    gate_output: bool = False  # when True the output layer is grouped too

    def __post_init__(self):
        if self.kind not in ("logreg", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ValueError("mlp requires hidden_dim >= 1")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("need input_dim >= 1 and num_classes >= 2")
        default = "per_hidden_unit" if self.kind == "mlp" else "per_input_feature"
        grouping = self.grouping or default
        if grouping not in ("per_hidden_unit", "per_input_feature"):
            raise ValueError(f"unknown grouping {grouping!r}")
        if grouping == "per_hidden_unit" and self.kind != "mlp":
            raise ValueError("per_hidden_unit grouping needs an mlp")
        object.__setattr__(self, "grouping", grouping)


@dataclass(frozen=True)
class GroupDef:
    gid: str
    indices: np.ndarray  # int64 coordinate indices into the flat vector


@dataclass(frozen=True)
class ModelLayout:
    """Flat-vector layout: slices for each weight block plus the group map."""

    spec: ModelSpec
    n_params: int
    groups: tuple[GroupDef, ...]
    ungrouped: np.ndarray  # indices exempt from gating
    group_sizes: np.ndarray  # int64, len == len(groups)
    coord_group: np.ndarray  # per-coordinate group id, -1 for ungrouped
    # per hidden unit, the indices of its outgoing weights (mlp only);
    # used by federated dropout, not by gating
    outgoing: tuple[np.ndarray, ...] = field(default=())

    def expand_mask(self, mask: np.ndarray) -> np.ndarray:
        """Per-group multipliers -> per-coordinate multipliers (ungrouped = 1)."""
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (len(self.groups),):
            raise DimensionError(
                f"mask has length {mask.size}, model has {len(self.groups)} groups"
            )
        out = np.ones(self.n_params)
        grouped = self.coord_group >= 0
        out[grouped] = mask[self.coord_group[grouped]]
        return out


def _mlp_offsets(spec: ModelSpec):
    d, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    w1 = (0, h * d)
    b1 = (w1[1], w1[1] + h)
    w2 = (b1[1], b1[1] + c * h)
    b2 = (w2[1], w2[1] + c)
    return w1, b1, w2, b2


@lru_cache(maxsize=None)
def layout_for(spec: ModelSpec) -> ModelLayout:
    """Build (and cache) the flat layout and group map for a spec."""
    d, c = spec.input_dim, spec.num_classes
    groups: list[GroupDef] = []
    outgoing: list[np.ndarray] = []

    if spec.kind == "logreg":
        n = c * d + c
        if spec.grouping == "per_input_feature":
            for j in range(d):
                idx = np.arange(c, dtype=np.int64) * d + j
                groups.append(GroupDef(f"f{j}", idx))
        bias = np.arange(c * d, n, dtype=np.int64)
        if spec.gate_output:
            groups.append(GroupDef("bias", bias))
            ungrouped = np.empty(0, dtype=np.int64)
        else:
            ungrouped = bias
    else:
        h = spec.hidden_dim
        w1, b1, w2, b2 = _mlp_offsets(spec)
        n = b2[1]
        if spec.grouping == "per_hidden_unit":
            for u in range(h):
                incoming = np.concatenate(
                    [np.arange(u * d, (u + 1) * d, dtype=np.int64),
                     np.array([b1[0] + u], dtype=np.int64)]
                )
                groups.append(GroupDef(f"h{u}", incoming))
                outgoing.append(w2[0] + np.arange(c, dtype=np.int64) * h + u)
        else:  # per_input_feature: columns of the first weight matrix
            for j in range(d):
                idx = np.arange(h, dtype=np.int64) * d + j
                groups.append(GroupDef(f"f{j}", idx))
        tail = np.arange(b1[1] if spec.grouping == "per_hidden_unit" else b1[0], n,
                         dtype=np.int64)
        if spec.gate_output:
            if spec.grouping != "per_hidden_unit":
                raise ValueError("gate_output requires per_hidden_unit grouping")
            # output layer grouped per output unit: its weight row plus bias
            for k in range(c):
                idx = np.concatenate(
                    [w2[0] + k * h + np.arange(h, dtype=np.int64),
                     np.array([b2[0] + k], dtype=np.int64)]
                )
                groups.append(GroupDef(f"o{k}", idx))
            ungrouped = np.empty(0, dtype=np.int64)
        else:
            ungrouped = tail

    coord_group = np.full(n, -1, dtype=np.int64)
    for g, gdef in enumerate(groups):
        coord_group[gdef.indices] = g
    sizes = np.array([len(g.indices) for g in groups], dtype=np.int64)

    covered = np.zeros(n, dtype=bool)
    for gdef in groups:
        if covered[gdef.indices].any():
            raise ValueError("group index ranges overlap")
        covered[gdef.indices] = True
    covered[ungrouped] = True
    assert covered.all(), "grouped + ungrouped ranges must cover every index"

    return ModelLayout(
        spec=spec, n_params=n, groups=tuple(groups), ungrouped=ungrouped,
        group_sizes=sizes, coord_group=coord_group, outgoing=tuple(outgoing),
    )


@dataclass
class GroupedParams:
    """Flat 32-bit parameter vector together with its group structure."""

    spec: ModelSpec
    flat: np.ndarray

    def __post_init__(self):
        lay = layout_for(self.spec)
        if self.flat.shape != (lay.n_params,):
            raise DimensionError(
                f"flat vector has {self.flat.size} entries, "
                f"layout expects {lay.n_params}"
            )

    @property
    def layout(self) -> ModelLayout:
        return layout_for(self.spec)

    def copy(self) -> "GroupedParams":
        return GroupedParams(self.spec, self.flat.copy())


@dataclass
class Batch:
    inputs: np.ndarray  # (n, input_dim)
    labels: np.ndarray  # (n,) int class ids

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] != self.labels.shape[0]:
            raise DimensionError(
                f"inputs {self.inputs.shape} do not align with "
                f"{self.labels.shape[0]} labels"
            )
        if self.labels.size < 1:
            raise DimensionError("batch must contain at least one example")


def init_params(spec: ModelSpec, rng: np.random.Generator, scale: float = 1.0,
                dtype=np.float32) -> GroupedParams:
    """Gaussian weight init with std scale/sqrt(fan_in); biases start at zero."""
    lay = layout_for(spec)
    flat = np.zeros(lay.n_params)
    d, c = spec.input_dim, spec.num_classes
    if spec.kind == "logreg":
        flat[: c * d] = rng.normal(0.0, scale / np.sqrt(d), size=c * d)
    else:
        h = spec.hidden_dim
        w1, b1, w2, _ = _mlp_offsets(spec)
        flat[w1[0]: w1[1]] = rng.normal(0.0, scale / np.sqrt(d), size=h * d)
        flat[w2[0]: w2[1]] = rng.normal(0.0, scale / np.sqrt(h), size=c * h)
    return GroupedParams(spec, flat.astype(dtype))


def _unpack(spec: ModelSpec, flat: np.ndarray):
    d, c = spec.input_dim, spec.num_classes
    if spec.kind == "logreg":
        return flat[: c * d].reshape(c, d), flat[c * d:]
    w1, b1, w2, b2 = _mlp_offsets(spec)
    h = spec.hidden_dim
    return (
        flat[w1[0]: w1[1]].reshape(h, d),
        flat[b1[0]: b1[1]],
        flat[w2[0]: w2[1]].reshape(c, h),
        flat[b2[0]: b2[1]],
    )


def _check_batch(spec: ModelSpec, batch: Batch):
    if batch.inputs.shape[1] != spec.input_dim:
        raise DimensionError(
            f"batch inputs have {batch.inputs.shape[1]} features, "
            f"model expects {spec.input_dim}"
        )
    if batch.labels.max() >= spec.num_classes or batch.labels.min() < 0:
        raise DimensionError(
            f"label {int(batch.labels.max())} out of range for "
            f"{spec.num_classes} classes"
        )


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward(params: GroupedParams, batch: Batch, mask=None):
    """Masked forward pass.

    Returns (loss, logits) where loss is the mean softmax cross-entropy over
    the batch. A mask of per-group multipliers in [0, 1] scales every
    parameter of group g by mask[g]; ungrouped coordinates are untouched.
    Computation runs in the dtype of params.flat.
    """
    spec = params.spec
    _check_batch(spec, batch)
    dtype = params.flat.dtype
    flat = params.flat
    if mask is not None:
        flat = flat * params.layout.expand_mask(mask).astype(dtype)
    x = batch.inputs.astype(dtype, copy=False)
    if spec.kind == "logreg":
        w, b = _unpack(spec, flat)
        logits = x @ w.T + b
    else:
        w1, b1, w2, b2 = _unpack(spec, flat)
        hidden = np.maximum(x @ w1.T + b1, 0)
        logits = hidden @ w2.T + b2
    logp = _log_softmax(logits)
    loss = -logp[np.arange(len(batch.labels)), batch.labels].mean()
    return loss, logits


def backward(params: GroupedParams, batch: Batch, mask=None,
             return_mask_grad: bool = False):
    """Gradient of the masked mean cross-entropy w.r.t. the flat parameters.

    With return_mask_grad=True additionally returns the per-group gradient
    w.r.t. the mask multipliers (used for reparameterized gate training).
    Coordinates of groups with mask[g] == 0 receive exactly zero gradient.
    """
    spec = params.spec
    _check_batch(spec, batch)
    lay = params.layout
    dtype = params.flat.dtype
    mult = None
    flat = params.flat
    if mask is not None:
        mult = lay.expand_mask(mask).astype(dtype)
        flat = flat * mult
    x = batch.inputs.astype(dtype, copy=False)
    n = len(batch.labels)

    grad_eff = np.empty_like(params.flat)
    if spec.kind == "logreg":
        w, b = _unpack(spec, flat)
        logits = x @ w.T + b
        p = np.exp(_log_softmax(logits))
        p[np.arange(n), batch.labels] -= 1
        p = (p / n).astype(dtype, copy=False)
        grad_eff[: w.size] = (p.T @ x).ravel()
        grad_eff[w.size:] = p.sum(axis=0)
    else:
        w1, b1, w2, b2 = _unpack(spec, flat)
        z1 = x @ w1.T + b1
        hidden = np.maximum(z1, 0)
        logits = hidden @ w2.T + b2
        p = np.exp(_log_softmax(logits))
        p[np.arange(n), batch.labels] -= 1
        p = (p / n).astype(dtype, copy=False)
        dhidden = p @ w2
        dz1 = dhidden * (z1 > 0)
        o1, ob1, o2, ob2 = _mlp_offsets(spec)
        grad_eff[o1[0]: o1[1]] = (dz1.T @ x).ravel()
        grad_eff[ob1[0]: ob1[1]] = dz1.sum(axis=0)
        grad_eff[o2[0]: o2[1]] = (p.T @ hidden).ravel()
        grad_eff[ob2[0]: ob2[1]] = p.sum(axis=0)

    grad = grad_eff if mult is None else grad_eff * mult
    if not return_mask_grad:
        return grad
    # d loss / d mask[g] = sum over the group's coords of param_i * grad_eff_i
    contrib = params.flat.astype(np.float64) * grad_eff.astype(np.float64)
    grouped = lay.coord_group >= 0
    mask_grad = np.bincount(
        lay.coord_group[grouped], weights=contrib[grouped],
        minlength=len(lay.groups),
    )
    return grad, mask_grad


def submodel_indices(lay: ModelLayout, unit_mask: np.ndarray) -> np.ndarray:
    """Flat indices of the subnetwork keeping only the masked hidden units.

    Order matches the natural layout of the smaller MLP (retained first-layer
    rows, retained hidden biases, second-layer columns of retained units,
    output biases), so flat[indices] is directly a valid parameter vector for
    a spec with hidden_dim == mask.sum().
    """
    spec = lay.spec
    if spec.kind != "mlp" or spec.grouping != "per_hidden_unit":
        raise DimensionError("submodels require per-hidden-unit MLP grouping")
    unit_mask = np.asarray(unit_mask, dtype=bool)
    if unit_mask.shape != (spec.hidden_dim,):
        raise DimensionError(
            f"unit mask has {unit_mask.size} entries, model has "
            f"{spec.hidden_dim} hidden units"
        )
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    w1, b1, w2, b2 = _mlp_offsets(spec)
    retained = np.flatnonzero(unit_mask)
    parts = [
        (retained[:, None] * d + np.arange(d)).ravel(),      # first-layer rows
        b1[0] + retained,                                    # hidden biases
        (w2[0] + np.arange(c)[:, None] * h + retained).ravel(),  # out columns
        np.arange(b2[0], b2[1]),                             # output biases
    ]
    return np.concatenate(parts).astype(np.int64)


def group_norms(params: GroupedParams) -> np.ndarray:
    """Per-group L2 norms of the flat vector, accumulated in float64."""
    lay = params.layout
    grouped = lay.coord_group >= 0
    sq = params.flat.astype(np.float64) ** 2
    sums = np.bincount(lay.coord_group[grouped], weights=sq[grouped],
                       minlength=len(lay.groups))
    return np.sqrt(sums)
