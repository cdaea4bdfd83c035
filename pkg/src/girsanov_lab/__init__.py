"""Girsanov change-of-drift toolkit: weights, estimators and equivalence checks."""

__version__ = "0.1.0"
