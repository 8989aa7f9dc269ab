"""Named random sub-streams derived from one root seed."""
import zlib

import numpy as np


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, name, keys...).

    Streams are keyed by name rather than drawn in sequence, so adding a
    client or a round never shifts the draws of another stream.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *(int(k) for k in keys)])
