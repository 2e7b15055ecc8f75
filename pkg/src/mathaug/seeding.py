"""Deterministic per-record seeding.

Every augmentation derives its RNG from (global_seed, record id, namespace)
via SHA-256, so results are stable across runs, thread counts, and corpus
subsetting.
"""

from __future__ import annotations

import hashlib
import random


def record_seed(global_seed: int, record_id: str, namespace: str = "") -> int:
    """64-bit seed derived from the global seed and a record identity."""
    digest = hashlib.sha256(
        f"{global_seed}\x1f{namespace}\x1f{record_id}".encode("utf-8")
    ).digest()
    return int.from_bytes(digest[:8], "big")


def record_rng(global_seed: int, record_id: str, namespace: str = "") -> random.Random:
    return random.Random(record_seed(global_seed, record_id, namespace))
