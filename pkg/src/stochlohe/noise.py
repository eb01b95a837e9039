"""Counter-based Gaussian noise.

Every stream is addressed by ``(master_seed, stream_id)``.  The raw 64-bit words
come from the Philox4x64 counter-based generator keyed with
``derive_seed(master_seed, stream_id)``, so word ``i`` of a stream is a pure
function of the key and ``i``.  Normals are produced by Box-Muller on aligned
word pairs, which makes draws chunk-invariant: ``normals(a)`` followed by
``normals(b)`` equals ``normals(a + b)`` bit for bit.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.random import Philox

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Salt separating Brownian-bridge refinement streams from primary streams.
BRIDGE_TAG = 0xB81D6E5A3C


def derive_seed(master_seed: int, stream_id: int) -> int:
    """Mix ``(master_seed, stream_id)`` into a 64-bit seed.

    The algorithm is the SplitMix64 step: add ``(stream_id + 1)`` golden-ratio
    increments to the master seed, then apply the SplitMix64 finalizer::

        z = (master + (stream_id + 1) * 0x9E3779B97F4A7C15) mod 2**64
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 mod 2**64
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB mod 2**64
        z =  z ^ (z >> 31)

    Every step is a bijection of 64-bit words, so distinct stream ids under one
    master seed never collide (for ``stream_id < 2**64``).
    """
    z = (int(master_seed) + (int(stream_id) + 1) * _GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def derive_seeds(master_seed: int, stream_ids) -> np.ndarray:
    """Vectorized :func:`derive_seed` returning a ``uint64`` array."""
    ids = np.asarray(stream_ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(int(master_seed) & MASK64) + (ids + np.uint64(1)) * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


def _raw_words(key: int, start: int, n: int) -> np.ndarray:
    # Philox4x64 emits four words per counter value.
    block = start // 4
    offset = start - 4 * block
    return Philox(key=key, counter=block).random_raw(offset + n)[offset:]


def _to_unit(words: np.ndarray) -> np.ndarray:
    """Map 64-bit words to doubles in the open interval (0, 1)."""
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def normals_at(key: int, start: int, n: int) -> np.ndarray:
    """Standard normals ``start .. start + n - 1`` of the stream with ``key``."""
    if n <= 0:
        return np.empty(0)
    p0 = start // 2
    p1 = (start + n - 1) // 2 + 1
    u = _to_unit(_raw_words(key, 2 * p0, 2 * (p1 - p0)))
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    angle = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * (p1 - p0))
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    skip = start - 2 * p0
    return z[skip:skip + n]


class NoiseStream:
    """A reproducible source of Brownian increments for one trajectory.

    ``counter`` is the number of 64-bit words consumed so far; each normal or
    uniform consumes one word.  Identical ``(master_seed, stream_id)`` pairs
    replay identical sequences.
    """

    def __init__(self, master_seed: int, stream_id: int = 0, counter: int = 0):
        self.master_seed = int(master_seed) & MASK64
        self.stream_id = int(stream_id)
        self.counter = int(counter)
        self.key = derive_seed(self.master_seed, self.stream_id)
        self._last = ""

    def __repr__(self):
        return (f"NoiseStream(master_seed={self.master_seed}, "
                f"stream_id={self.stream_id}, counter={self.counter})")

    def normals(self, n: int) -> np.ndarray:
        # A pending odd word may have been spent on a uniform; never reuse it.
        if self.counter % 2 and self._last == "uniform":
            self.counter += 1
        self._last = "normal"
        z = normals_at(self.key, self.counter, n)
        self.counter += n
        return z

    def increments(self, n: int, dt: float) -> np.ndarray:
        """``n`` Brownian increments over steps of length ``dt``."""
        return math.sqrt(dt) * self.normals(n)

    def uniforms(self, n: int) -> np.ndarray:
        u = _to_unit(_raw_words(self.key, self.counter, n))
        self.counter += n
        self._last = "uniform"
        return u

    def spawn(self, tag: int) -> "NoiseStream":
        """Independent child stream, e.g. for Brownian-bridge refinement."""
        return NoiseStream(derive_seed(self.key, BRIDGE_TAG), tag)


def increment_block(master_seed: int, stream_ids, start: int, n: int, dt: float) -> np.ndarray:
    """Increments ``start .. start + n - 1`` for several streams, one row each."""
    keys = derive_seeds(master_seed, stream_ids)
    out = np.empty((len(keys), n))
    scale = math.sqrt(dt)
    for row, key in enumerate(keys):
        out[row] = normals_at(int(key), start, n)
    out *= scale
    return out


def split_increment(dW: float, dt: float, z: float) -> tuple[float, float]:
    """Split an increment over ``dt`` into two halves by a Brownian-bridge draw.

    Given ``W(dt) - W(0) = dW``, the midpoint value is Gaussian with mean ``dW/2``
    and variance ``dt/4``; ``z`` is the standard normal realizing it.
    """
    first = 0.5 * dW + 0.5 * math.sqrt(dt) * z
    return first, dW - first
