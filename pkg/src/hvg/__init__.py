"""Hierarchical coarse-to-fine adversarial video generation, desk scale."""

__version__ = "0.1.0"
