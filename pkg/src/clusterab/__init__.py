"""Analysis of cluster-randomized experiments with ratio metrics."""

__version__ = "0.1.0"
