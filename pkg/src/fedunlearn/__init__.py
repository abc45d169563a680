"""Deterministic federated-unlearning simulator over strongly convex objectives."""

__version__ = "0.1.0"
