import zlib

import numpy as np


def _key(part):
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part)


def derive_seed(seed, *keys):
    """Deterministic child seed for a named sub-stream of ``seed``."""
    entropy = [int(seed)] + [_key(k) for k in keys]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0])


def rng_for(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))
