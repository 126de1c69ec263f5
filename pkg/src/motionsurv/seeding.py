"""Named, order-independent random streams derived from one master seed."""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key(parts):
    out = []
    for part in parts:
        if isinstance(part, str):
            out.append(zlib.crc32(part.encode("utf-8")))
        else:
            out.append(int(part) & 0xFFFFFFFF)
    return tuple(out)


def stream(seed: int, *key) -> np.random.Generator:
    """Counter-based generator for the sub-stream ``key`` of ``seed``.

    Keys may mix strings (hashed) and integers, e.g.
    ``stream(seed, "subject", 17)``. Streams with different keys are
    statistically independent, so results never depend on the order in
    which streams are consumed.
    """
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=_key(key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key) -> int:
    """A 63-bit integer seed for the sub-stream ``key`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=_key(key))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))
