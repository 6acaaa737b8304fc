"""Cluster-aware balancing weights for group disparity estimation."""

__version__ = "0.1.0"
