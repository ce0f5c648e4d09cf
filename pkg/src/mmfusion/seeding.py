"""Child-seed derivation from a single master seed.

``derive_seed(master, "train", "late", 3)`` hashes the master seed together
with the component path, so every consumer draws from an independent stream
and adding a consumer never perturbs the others.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *path) -> int:
    key = "/".join([str(int(master)), *(str(p) for p in path)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def rng_for(master: int, *path) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))
