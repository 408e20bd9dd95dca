"""Derivation of independent random streams from a single run seed.

Every stream is ``numpy.random.default_rng([seed, stream, *keys])``: a
SeedSequence built from the run seed, a fixed stream id and optional
integer keys (task index, epoch).  Streams never share state, so e.g. the
number of Phase-1 epochs cannot change the Phase-2 shuffles.
"""

import numpy as np

TASKGEN = 0
INIT = 1
SHUFFLE_PHASE1 = 2
SHUFFLE_PHASE2 = 3
BUFFER = 4
THEORY = 5

STREAMS = {
    "taskgen": TASKGEN,
    "init": INIT,
    "shuffle-phase1": SHUFFLE_PHASE1,
    "shuffle-phase2": SHUFFLE_PHASE2,
    "buffer": BUFFER,
    "theory": THEORY,
}


def stream(seed: int, which: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(which), *(int(k) for k in keys)])


def stream_seed(seed: int, which: int, *keys: int) -> int:
    """A 63-bit integer seed for APIs that want an int rather than a Generator."""
    return int(stream(seed, which, *keys).integers(0, 2**63 - 1))
