"""Sparse tabularization of event streams, with boosted-tree and linear baselines."""

__version__ = "0.1.0"
