"""Toolkit for math word-problem corpora: ingestion, augmentation, manifests, evaluation."""

__version__ = "0.1.0"

SCHEMA_VERSION = 1
