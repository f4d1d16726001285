"""Stable seed derivation.

Every random decision in the pipeline draws from a seed derived by hashing the
global seed together with a path of labels (stage, item id, attempt, ...), so
results never depend on scheduling order or on whether a run was resumed.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK63 = (1 << 63) - 1


def derive_seed(*parts: object) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") & _MASK63


def rng_for(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def stable_hash(data: bytes | str) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big") & _MASK63
