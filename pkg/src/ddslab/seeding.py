"""Seed fan-out: one root seed, named child streams."""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    digest = hashlib.sha256(str(key).encode()).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(root: int, *keys) -> int:
    """Deterministic 63-bit child seed for ``root`` and a path of names/indices."""
    words = [int(root) & 0xFFFFFFFF, (int(root) >> 32) & 0xFFFFFFFF] + [_key_int(k) for k in keys]
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def configure_determinism(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
