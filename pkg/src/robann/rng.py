"""Reproducible random streams.

Every random draw in the package comes from a Philox stream whose 128-bit key
is derived from ``(seed, *tags)``. Philox is counter based, so a stream is a
pure function of ``(key, counter)`` and two different tag tuples never share
state. Setup randomness uses the ``"setup"``-style tags, per-query coins use
``("query", ordinal)``.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def _tag_int(tag) -> int:
    if isinstance(tag, (bool, np.bool_)):
        return int(tag)
    if isinstance(tag, (int, np.integer)):
        return int(tag) & MASK64
    digest = hashlib.blake2b(str(tag).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_key(seed: int, *tags) -> np.ndarray:
    """128-bit Philox key (two uint64 words) for ``(seed, *tags)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64, spawn_key=tuple(_tag_int(t) for t in tags))
    return ss.generate_state(2, np.uint64)


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the stream named by ``tags``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *tags)))


def derive_seed(seed: int, *tags) -> int:
    """64-bit child seed, used to hand a sub-structure its own master seed."""
    return int(stream_key(seed, *tags)[0])


def uniform_words(seed: int, stream_id, counter: int, size: int = 1) -> np.ndarray:
    """Raw 64-bit words at position ``counter`` of stream ``stream_id``.

    ``uniform_words(s, i, c, n)[j] == uniform_words(s, i, c + j, 1)[0]`` does
    *not* hold word-by-word because Philox emits four words per counter
    block; the guarantee is that equal ``(seed, stream_id, counter)`` always
    yield equal words.
    """
    bg = np.random.Philox(key=stream_key(seed, stream_id), counter=int(counter))
    return bg.random_raw(size)


def as_generator(rng, seed: int = 0) -> np.random.Generator:
    if rng is None:
        return stream(seed)
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
