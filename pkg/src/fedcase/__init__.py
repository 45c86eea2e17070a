"""Desk-scale federated learning with DP optimisers and synthetic case-based explanations."""

__version__ = "0.1.0"
