"""Seeded random streams.

Every stream is a Philox counter-based generator keyed by a master seed plus a
spawn key, so a stream for ``(seed, agent, episode, t)`` can be rebuilt at any
point without replaying earlier draws.
"""

import numpy as np


def stream(seed, *key):
    """Return an independent ``numpy.random.Generator`` for ``(seed, *key)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


# fixed spawn-key slots, so streams never collide across roles
ENV = 0
INIT = 1
AGENT = 2
STEP = 3
