"""Uncertainty-aware CSI localization with mixture density networks."""

__version__ = "0.1.0"
