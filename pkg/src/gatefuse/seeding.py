"""Order-independent 64-bit seed derivation.

Every random draw in the toolkit is keyed by an explicit tuple such as
(master seed, utterance index, view, layer).  The tuple is folded through
a splitmix64-style mixer into one 64-bit value that seeds a fresh
generator, so results never depend on generation order and utterances can
be produced concurrently.
"""

from __future__ import annotations

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return (x ^ (x >> 31)) & _MASK


def derive_seed(*parts: int | str) -> int:
    """Mix integers and strings into a single 64-bit seed.

    Strings are folded byte-wise so ids of any length contribute fully;
    the result is stable across platforms and process runs.
    """
    h = 0
    for part in parts:
        if isinstance(part, str):
            for chunk in part.encode("utf-8"):
                h = _splitmix64(h ^ chunk)
            h = _splitmix64(h ^ len(part))
        else:
            h = _splitmix64(h ^ (int(part) & _MASK))
    return _splitmix64(h)


def rng_for(*parts: int | str) -> np.random.Generator:
    """A fresh generator seeded from the mixed key."""
    return np.random.default_rng(derive_seed(*parts))
