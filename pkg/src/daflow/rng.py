"""Seeded, named random streams.

Every stochastic draw in the package comes from ``make_rng(seed, *stream)``:
a Philox counter-based generator keyed by the seed and a stream path such as
``("fit", epoch, window)``.  Streams are independent and reproducible, so a
resumed run regenerates exactly the draws the uninterrupted run would make.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_words(stream) -> list[int]:
    words = []
    for part in stream:
        if isinstance(part, (int, np.integer)):
            words.append(int(part) & 0xFFFFFFFF)
        else:
            digest = hashlib.sha256(str(part).encode()).digest()
            words.append(int.from_bytes(digest[:4], "little"))
    return words


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Generator for ``(seed, stream...)``; equal arguments give equal draws."""
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                  *_stream_words(stream)])
    return np.random.Generator(np.random.Philox(seq))


def check_random_state(random_state) -> np.random.Generator:
    """Coerce ``None``/int/Generator into a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if random_state is None:
        return np.random.default_rng()
    return make_rng(int(random_state))
