"""Named RNG substreams derived from a single master seed.

Every source of randomness in an experiment (stream generation, parameter
init, batch shuffling, reservoir sampling, random scoring) pulls from its
own named substream so that two methods run under the same master seed
differ only where the methods themselves differ.
"""

import zlib

import numpy as np


def child_seed(master_seed: int, *names: str) -> np.random.SeedSequence:
    # crc32 keeps the derivation stable across platforms and Python versions
    key = tuple(zlib.crc32(n.encode("utf-8")) for n in names)
    return np.random.SeedSequence(master_seed, spawn_key=key)


def rng_for(master_seed: int, *names: str) -> np.random.Generator:
    """Generator for the substream identified by `names`."""
    return np.random.default_rng(child_seed(master_seed, *names))
