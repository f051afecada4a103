"""Deterministic, scope-derived random number generators.

Every stochastic operation in the toolkit derives its generator from
(seed, scope parts) through SHA-256, so shuffling one category or record
never perturbs another and results are identical across platforms.
"""

from __future__ import annotations

import hashlib
import random


def derive_int(seed: int, *scope: object) -> int:
    material = ":".join([str(seed), *[str(part) for part in scope]])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(seed: int, *scope: object) -> random.Random:
    return random.Random(derive_int(seed, *scope))
