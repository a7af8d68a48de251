"""Heterogeneity-aware aggregation strategy selection for simulated federated learning."""

__version__ = "0.1.0"
