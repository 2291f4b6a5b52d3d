"""Named, reproducible random substreams.

All randomness in a run derives from one master seed.  A substream is
addressed by a tuple of string/int keys (e.g. ("arrivals", cycle) or
("channel", "delta", n, k, t)); the keys are hashed with SHA-256 into
SeedSequence entropy, so the same (master, keys) always yields the same
bit stream regardless of call order.
"""

import hashlib

import numpy as np


def _key_words(keys) -> list[int]:
    enc = "\x1f".join(f"{type(k).__name__}:{k}" for k in keys).encode()
    digest = hashlib.sha256(enc).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 32, 4)]


def substream(master_seed: int, *keys) -> np.random.Generator:
    """Generator for the substream named by ``keys`` under ``master_seed``."""
    ss = np.random.SeedSequence(entropy=[int(master_seed)] + _key_words(keys))
    return np.random.Generator(np.random.PCG64(ss))


def uniform_phase(master_seed: int, *keys) -> float:
    """Deterministic phase in [0, 2*pi) derived by hashing, no generator state."""
    words = _key_words(("phase", int(master_seed)) + keys)
    u = (words[0] + (words[1] << 32)) / float(1 << 64)
    return 2.0 * np.pi * u
