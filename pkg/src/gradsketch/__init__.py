"""Gradient sketching, sparsification and influence-based data attribution."""

__version__ = "0.1.0"
