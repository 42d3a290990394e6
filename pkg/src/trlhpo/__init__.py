"""Transformer actor-critic search over small CNN architectures."""

__version__ = "0.1.0"
