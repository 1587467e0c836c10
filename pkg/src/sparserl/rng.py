"""Named, splittable random streams.

Every stochastic consumer (initialisation, dropout, batch sampling,
environment noise, evaluation) asks for its own stream by name, so adding a
draw in one place never shifts the numbers seen anywhere else.
"""
import hashlib

import numpy as np


def _name_key(name):
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed, *names):
    """Philox generator keyed by ``seed`` and a path of names or integers."""
    key = tuple(n if isinstance(n, int) and n >= 0 else _name_key(n) for n in names)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *names):
    """A 63-bit integer seed derived from a stream path."""
    return int(stream(seed, *names).integers(0, 2**63 - 1))
