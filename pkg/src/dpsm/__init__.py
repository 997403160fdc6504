"""Conformal prediction and conformal training with a learned quantile threshold."""

__version__ = "0.1.0"
