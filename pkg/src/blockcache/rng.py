"""Counter-based random streams with platform-independent output.

A stream is addressed by ``(seed, stream_id)``; the pair fully determines
the value sequence on any platform. Words come from a Philox generator
keyed by the pair, and all float transforms (53-bit uniforms, Box-Muller
normals) are fixed here rather than delegated, so the mapping from draw
counter to values never depends on library internals.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_INV53 = 2.0**-53


class RngStream:
    """Deterministic random stream identified by (seed, stream_id).

    ``counter`` counts 64-bit words consumed so far. Distinct stream ids
    select distinct Philox keys, so streams never share counter space.
    """

    def __init__(self, seed: int, stream_id: int = 0, counter: int = 0):
        for name, value in (("seed", seed), ("stream_id", stream_id)):
            if not 0 <= int(value) <= _MASK64:
                raise ValueError(f"{name} must fit in 64 unsigned bits, got {value}")
        if counter < 0:
            raise ValueError(f"counter must be non-negative, got {counter}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._bits = np.random.Philox(key=self.seed | (self.stream_id << 64))
        self.counter = 0
        if counter:
            # Philox.advance counts in output blocks, not words; replaying is
            # exact and streams are only ever resumed near their start.
            self.raw_words(counter)

    def spawn(self, stream_id: int) -> "RngStream":
        """Fresh stream with the same seed and a different stream id."""
        return RngStream(self.seed, stream_id)

    def raw_words(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit words."""
        words = self._bits.random_raw(int(n))
        self.counter += int(n)
        return np.atleast_1d(words).astype(np.uint64)

    def uniforms(self, n: int) -> np.ndarray:
        """``n`` uniforms in (0, 1], one word each (top 53 bits, offset by 1)."""
        top = self.raw_words(n) >> np.uint64(11)
        return (top.astype(np.float64) + 1.0) * _INV53

    def normals(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller, both outputs of each pair used.

        Draw order is fixed: one block of uniforms for the radius, one for
        the angle, outputs interleaved (cos first).
        """
        if np.isscalar(shape):
            shape = (int(shape),)
        n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        pairs = (n + 1) // 2
        u_r = self.uniforms(pairs)
        u_a = self.uniforms(pairs)
        radius = np.sqrt(-2.0 * np.log(u_r))
        angle = 2.0 * math.pi * u_a
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n].reshape(shape)


def gaussian(rng: RngStream, shape) -> np.ndarray:
    """I.i.d. standard normal tensor drawn from ``rng``."""
    return rng.normals(shape)
