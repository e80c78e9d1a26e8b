"""Continual-learning dynamics lab for sparse-row feed-forward networks."""

__version__ = "0.1.0"
