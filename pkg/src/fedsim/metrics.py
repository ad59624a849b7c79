"""Evaluation: accuracies, sparsity ratio, gate-alignment statistics, records."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .nn import Batch, GroupedParams, forward

CSV_HEADER = ("round,global_acc,local_acc_mean,sparsity_pct,tv_avg,tv_max,"
              "bytes_up_cum,bytes_down_cum,wall_ms")


@dataclass
class RoundRecord:
    round_idx: int
    global_acc: float
    local_acc_mean: float
    sparsity_pct: float
    tv_avg: float
    tv_max: float
    bytes_up_cum: int
    bytes_down_cum: int
    wall_ms: int

    def csv_row(self) -> str:
        return (f"{self.round_idx},{self.global_acc:.6f},"
                f"{self.local_acc_mean:.6f},{self.sparsity_pct:.4f},"
                f"{self.tv_avg:.6f},{self.tv_max:.6f},"
                f"{self.bytes_up_cum},{self.bytes_down_cum},{self.wall_ms}")

    @staticmethod
    def from_csv_row(row: str) -> "RoundRecord":
        parts = row.strip().split(",")
        return RoundRecord(
            int(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]),
            float(parts[4]), float(parts[5]), int(parts[6]), int(parts[7]),
            int(parts[8]),
        )


def predictions(params: GroupedParams, inputs: np.ndarray) -> np.ndarray:
    """Argmax class ids; ties resolve to the lowest class id."""
    _, logits = forward(params, Batch(inputs, np.zeros(len(inputs), np.int64)))
    return np.argmax(logits, axis=1)


def global_accuracy(params: GroupedParams, inputs: np.ndarray,
                    labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise DimensionError("cannot evaluate accuracy on an empty test set")
    return float(np.mean(predictions(params, inputs) == labels))


def ensemble_accuracy(params_list, inputs: np.ndarray,
                      labels: np.ndarray) -> float:
    """Accuracy of averaged softmax probabilities across ensemble members."""
    if len(labels) == 0:
        raise DimensionError("cannot evaluate accuracy on an empty test set")
    probs = None
    for params in params_list:
        _, logits = forward(params, Batch(inputs, np.zeros(len(inputs),
                                                           np.int64)))
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        probs = p if probs is None else probs + p
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def local_accuracy(snapshots, spec, shards) -> float:
    """Mean accuracy of each shard's last-communicated model on its own test set.

    Snapshots are full flat vectors; sparse strategies store them with their
    binary gates already applied.
    """
    if len(snapshots) != len(shards):
        raise DimensionError("need one snapshot per shard")
    accs = []
    for flat, shard in zip(snapshots, shards):
        params = GroupedParams(spec, flat)
        accs.append(global_accuracy(params, shard.test_x, shard.test_y))
    return float(np.mean(accs))


def sparsity_ratio(theta: np.ndarray, epsilon: float,
                   group_sizes: np.ndarray) -> float:
    """Percent of prunable parameters whose group probability is <= epsilon."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie strictly inside (0, 1)")
    theta = np.asarray(theta, dtype=np.float64)
    sizes = np.asarray(group_sizes, dtype=np.float64)
    total = sizes.sum()
    if total == 0:
        return 0.0
    return float(100.0 * sizes[theta <= epsilon].sum() / total)


def sparsity_from_mask(keep_mask: np.ndarray, group_sizes: np.ndarray) -> float:
    """Percent of prunable parameters in groups with a cleared keep bit."""
    sizes = np.asarray(group_sizes, dtype=np.float64)
    total = sizes.sum()
    if total == 0:
        return 0.0
    return float(100.0 * sizes[~np.asarray(keep_mask, bool)].sum() / total)


def tv_alignment(pi_per_client, theta: np.ndarray):
    """(average, maximum) of |pi - theta| over the cohort's gates."""
    theta = np.asarray(theta, dtype=np.float64)
    diffs = []
    for pi in pi_per_client:
        pi = np.asarray(pi, dtype=np.float64)
        if pi.shape != theta.shape:
            raise DimensionError("client and server gate counts differ")
        diffs.append(np.abs(pi - theta))
    if not diffs:
        return 0.0, 0.0
    stacked = np.stack(diffs)
    return float(stacked.mean()), float(stacked.max())
