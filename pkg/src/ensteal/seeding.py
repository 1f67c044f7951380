"""Deterministic seed derivation.

Every randomized stage draws from a seed derived here, so whole runs replay
bit-for-bit from a single root seed.
"""

import numpy as np

_MASK64 = (1 << 64) - 1


def mask64(seed: int) -> int:
    """Clamp an integer into the unsigned 64-bit range."""
    return int(seed) & _MASK64


def derive_seed(*parts: int) -> int:
    """Mix integer components into one decorrelated 64-bit seed.

    Runs the parts through numpy's SeedSequence so nearby inputs (e.g.
    consecutive cycle or member indices) yield independent streams.
    """
    entropy = [mask64(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])
