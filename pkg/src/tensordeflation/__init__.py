"""Hotelling deflation of noisy low-rank asymmetric tensors and its large-dimensional limits."""

__version__ = "0.1.0"
