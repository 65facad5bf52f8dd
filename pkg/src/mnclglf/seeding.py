"""Named random substreams derived from one root seed.

Every source of randomness in a run (weight init, queue init, shuffling,
augmentation, single-embedding selection) draws from its own substream so
that changing how one consumer uses randomness never perturbs the others.
"""
from __future__ import annotations

import zlib

import numpy as np
import torch


def substream(root: int, name: str, *index: int) -> int:
    """64-bit seed for the substream ``name`` (optionally indexed) of ``root``."""
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(root) & (2**64 - 1), spawn_key=key)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def generator(root: int, name: str, *index: int) -> torch.Generator:
    g = torch.Generator()
    # torch seeds must fit in a signed 64-bit range
    g.manual_seed(substream(root, name, *index) & (2**63 - 1))
    return g
