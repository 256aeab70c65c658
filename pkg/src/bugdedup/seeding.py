"""Named random substreams derived from one run seed.

Every randomized stage draws from its own substream so that changing how
much randomness one stage consumes can never perturb another. Substream
seeds are derived by hashing ``"<seed>:<label>"`` with SHA-256, which is
stable across platforms and Python versions.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def substream_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(seed, label))
