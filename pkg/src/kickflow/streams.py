"""Counter-based random streams.

Every stochastic routine in the package draws from a Philox generator keyed
by (seed, domain tag, replicate, step).  Streams with distinct keys are
independent, so ensembles can be evaluated in any order or in parallel
without changing a single draw.
"""

import numpy as np

__all__ = [
    "substream",
    "TAG_KICK",
    "TAG_INIT",
    "TAG_COUPLE",
    "TAG_ORACLE",
    "TAG_FK",
    "TAG_DISSIPATION",
    "TAG_EIGEN",
    "TAG_CLOUD",
    "TAG_GENERIC",
]

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)

TAG_KICK = 1
TAG_INIT = 2
TAG_COUPLE = 3
TAG_ORACLE = 4
TAG_FK = 5
TAG_DISSIPATION = 6
TAG_EIGEN = 7
TAG_CLOUD = 8
TAG_GENERIC = 9


def substream(seed: int, tag: int = TAG_GENERIC, a: int = 0, b: int = 0) -> np.random.Generator:
    """Independent generator fully determined by (seed, tag, a, b).

    The words land in the Philox key/counter, so replaying the same
    coordinates replays the same draws regardless of what other streams
    were consumed in between.
    """
    key = np.array([np.uint64(seed) & _MASK, np.uint64(tag) & _MASK], dtype=np.uint64)
    # counter word 0 is the running block counter; keep it free.
    counter = np.array([0, 0, np.uint64(a) & _MASK, np.uint64(b) & _MASK], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
