"""Named seed streams derived from one root seed."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 63) - 1


def derive_seed(root: int, name: str) -> int:
    """``root XOR hash(name)``, truncated to 63 bits so numpy accepts it."""
    h = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
    return (int(root) ^ h) & _MASK


def rng_for(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, name))
