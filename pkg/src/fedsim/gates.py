"""Gate mathematics for structured sparsity.

Inclusion probabilities are parameterized by group weight magnitudes against
learnable softplus thresholds, prob = sigmoid((||w_g|| - tau_g) / T) with a
sharp temperature T. Training-time gate samples come from a stretched,
clamped sigmoid-of-logistic relaxation whose zero-temperature limit yields
exact binary gates consistent with those probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GateError

PROB_CLIP = 1e-7  # probabilities clamped away from {0, 1} before any log

# Relaxation constants: sigmoid temperature and stretch interval. These are
# the published defaults of the hard-concrete construction.
HC_BETA = 2.0 / 3.0
HC_GAMMA = -0.1
HC_ZETA = 1.1


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Overflow-safe logistic function, computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def inv_softplus(y: np.ndarray) -> np.ndarray:
    """Inverse of softplus for y > 0; large arguments short-circuit to y."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise GateError("inverse softplus requires strictly positive input")
    small = y < 30.0
    out = y.copy()
    out[small] = np.log(np.expm1(y[small]))
    return out


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GateState:
    """Per-group threshold pre-activations and the shared temperature."""

    v: np.ndarray
    temperature: float

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if not self.temperature > 0:
            raise GateError("temperature must be positive")

    def tau(self) -> np.ndarray:
        return softplus(self.v)

    def probs(self, norms: np.ndarray) -> np.ndarray:
        return theta_from_magnitude(norms, self.tau(), self.temperature)


@dataclass
class HardConcreteParams:
    log_alpha: np.ndarray
    beta: float = HC_BETA
    gamma: float = HC_GAMMA
    zeta: float = HC_ZETA

    def __post_init__(self):
        self.log_alpha = np.asarray(self.log_alpha, dtype=np.float64)
        if not (self.gamma < 0.0 < 1.0 < self.zeta):
            raise GateError("stretch interval must satisfy gamma < 0 < 1 < zeta")
        if not self.beta > 0:
            raise GateError("relaxation temperature beta must be positive")


def theta_from_magnitude(norms, tau, temperature) -> np.ndarray:
    """Inclusion probability sigmoid((norms - tau) / T) per group."""
    if not temperature > 0:
        raise GateError("temperature must be positive")
    norms = np.asarray(norms, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    return sigmoid((norms - tau) / temperature)


def init_v_for_target(norms, theta0: float, temperature: float) -> np.ndarray:
    """Solve for threshold pre-activations giving prob == theta0 per group.

    tau = norms - T * logit(theta0) must come out positive for every group;
    otherwise the caller needs a larger weight-initialization scale.
    """
    if not 0.0 < theta0 < 1.0:
        raise GateError("theta0 must lie strictly inside (0, 1)")
    norms = np.asarray(norms, dtype=np.float64)
    tau = norms - temperature * float(logit(theta0))
    if np.any(tau <= 0):
        raise GateError(
            "implied threshold is not positive for some group; increase the "
            "weight initialization scale or lower theta0"
        )
    return inv_softplus(tau)


def lambda0_from_precisions(lam: float, lam2: float) -> float:
    """Gate penalty strength implied by slab/spike precisions: 0.5*ln(lam2/lam)."""
    if lam <= 0 or lam2 <= 0:
        raise GateError("precisions must be positive")
    return 0.5 * float(np.log(lam2 / lam))


def l0_penalty(prob: np.ndarray, lambda0: float) -> float:
    """Expected number of active groups scaled by the penalty strength."""
    if lambda0 < 0:
        raise GateError("lambda0 must be non-negative")
    return float(lambda0 * np.asarray(prob, dtype=np.float64).sum())


def gate_cross_entropy(pi: np.ndarray, theta: np.ndarray) -> float:
    """Sum over groups of pi*ln(theta) + (1-pi)*ln(1-theta), theta clamped."""
    pi = np.asarray(pi, dtype=np.float64)
    th = np.clip(np.asarray(theta, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    return float((pi * np.log(th) + (1.0 - pi) * np.log1p(-th)).sum())


def hard_concrete_sample(hc: HardConcreteParams, uniform_draws: np.ndarray,
                         zero_temperature: bool = False) -> np.ndarray:
    """Gate values in [0, 1] from uniform draws strictly inside (0, 1).

    Relaxed mode stretches and clamps a sigmoid of logistic noise; the
    zero-temperature mode returns exact binary samples (ties resolve to 0).
    """
    u = np.asarray(uniform_draws, dtype=np.float64)
    if np.any(u <= 0) or np.any(u >= 1):
        raise GateError("uniform draws must lie strictly inside (0, 1)")
    noise = logit(u) + hc.log_alpha
    if zero_temperature:
        return (noise > 0).astype(np.float64)
    s = sigmoid(noise / hc.beta)
    stretched = s * (hc.zeta - hc.gamma) + hc.gamma
    return np.clip(stretched, 0.0, 1.0)


def hard_concrete_active_prob(hc: HardConcreteParams) -> np.ndarray:
    """P(gate > 0) under the relaxed distribution."""
    return sigmoid(hc.log_alpha - hc.beta * np.log(-hc.gamma / hc.zeta))


def sample_binary_gates(prob: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli draws, one per group, as a 0/1 float vector."""
    prob = np.asarray(prob, dtype=np.float64)
    if np.any(prob < 0) or np.any(prob > 1):
        raise GateError("gate probabilities must lie in [0, 1]")
    return (rng.random(prob.shape) < prob).astype(np.float64)
