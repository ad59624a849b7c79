"""Deterministic federated-learning simulator with sparsity-inducing gates."""

__version__ = "0.1.0"
