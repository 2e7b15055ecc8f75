"""Toy-scale multi-task trainer for mathaug training manifests."""

__version__ = "0.1.0"
