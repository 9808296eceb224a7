"""Master-seed splitting.

Every random stream is keyed by a path of names, e.g.
``stream(seed, "client", "c3", "batches")``.  Each name is hashed with CRC32
into the spawn key of a :class:`numpy.random.SeedSequence`, so adding a client
or a module never shifts the randomness of an unrelated stream.
"""

from __future__ import annotations

import zlib

import numpy as np


def spawn_key(*names: object) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)


def seed_sequence(seed: int, *names: object) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key(*names))


def stream(seed: int, *names: object) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *names)))


def derive_seed(seed: int, *names: object) -> int:
    """A 63-bit integer seed for a named sub-stream."""
    return int(seed_sequence(seed, *names).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
