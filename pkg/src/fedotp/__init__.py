"""Desk-scale federated prompt learning with optimal transport alignment."""

__version__ = "0.1.0"
