import zlib

import numpy as np


def child_rng(seed, purpose, *index):
    """Independent generator for (purpose, index...) derived from one root seed.

    Streams never depend on the order in which other streams are consumed.
    """
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(purpose.encode())]
    key.extend(int(i) for i in index)
    return np.random.default_rng(key)
