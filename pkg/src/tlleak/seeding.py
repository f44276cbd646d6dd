import zlib

import numpy as np


def derive_seed(seed: int, stage: str, *index: int) -> int:
    """Sub-seed for (seed, stage, index...).

    Stages are keyed by a CRC32 of their name, so adding a stage never shifts
    the streams of existing ones.
    """
    entropy = [int(seed) & 0xFFFFFFFF, zlib.crc32(stage.encode()), *(int(i) for i in index)]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> 1)


def rng_for(seed: int, stage: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stage, *index))
