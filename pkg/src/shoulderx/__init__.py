"""Shoulder X-ray classification heads, ensembles, preprocessing and metrics."""

__version__ = "0.1.0"
