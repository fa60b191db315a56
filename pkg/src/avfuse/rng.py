"""Splittable, counter-based pseudo-random generator.

Every source of randomness in this package (weight init, data synthesis,
shuffling, dropout masks, noise corruption) draws from an `Rng`. The
generator is a SplitMix64 stream: output i is `mix(key + (i+1)*GAMMA)`,
so bulk draws vectorize over a uint64 counter and two generators with the
same key produce identical values on any platform. `split` derives an
independent child key from string/int labels, which gives stable
per-purpose and per-sample streams no matter in which order they are used.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_U64 = np.uint64


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; a bijective mixing of uint64 values.

    All arithmetic is mod 2**64 by construction, so overflow is the point.
    """
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
        return z ^ (z >> _U64(31))


def _label_word(label) -> np.uint64:
    if isinstance(label, (int, np.integer)):
        return _U64(int(label) & 0xFFFFFFFFFFFFFFFF)
    if isinstance(label, str):
        # FNV-1a over the utf-8 bytes; cheap and platform independent
        h = 0xCBF29CE484222325
        for b in label.encode("utf-8"):
            h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
        return _U64(h)
    raise TypeError(f"rng split labels must be str or int, got {type(label).__name__}")


class Rng:
    """Deterministic random stream with explicit seeding and splitting."""

    def __init__(self, seed: int):
        with np.errstate(over="ignore"):
            self._key = _mix(_U64(int(seed) & 0xFFFFFFFFFFFFFFFF) + _GAMMA)
        self._count = 0

    def split(self, *labels) -> "Rng":
        """Derive an independent child stream; does not advance this one."""
        key = self._key
        with np.errstate(over="ignore"):
            for label in labels:
                key = _mix(key ^ _mix(_label_word(label) + _GAMMA))
            child = Rng.__new__(Rng)
            child._key = _mix(key + _GAMMA)
        child._count = 0
        return child

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            return _mix(self._key + idx * _GAMMA)

    def uniform(self, shape=None) -> np.ndarray | float:
        """Uniform float64 draws in [0, 1)."""
        if shape is None:
            return float(self._raw(1)[0] >> _U64(11)) * 2.0**-53
        shape = tuple(np.atleast_1d(shape).astype(int)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        out = (self._raw(n) >> _U64(11)).astype(np.float64) * 2.0**-53
        return out.reshape(shape)

    def gaussian(self, shape=None) -> np.ndarray | float:
        """Standard normal draws via Box-Muller."""
        scalar = shape is None
        if scalar:
            shape = (1,)
        shape = tuple(np.atleast_1d(shape).astype(int)) if not isinstance(shape, tuple) else shape
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        raw = self._raw(2 * m)
        # u1 in (0, 1] so log never sees zero
        u1 = ((raw[:m] >> _U64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (raw[m:] >> _U64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if scalar:
            return float(out[0])
        return out.reshape(shape)

    def integer(self, n: int) -> int:
        """One integer uniform on [0, n)."""
        return min(int(self.uniform() * n), n - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic random permutation of range(n)."""
        return np.argsort(self.uniform((n,)), kind="stable")

    def categorical(self, probs, shape=None) -> np.ndarray | int:
        """Index draws from a discrete distribution given by `probs`."""
        edges = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self.uniform((1,) if shape is None else shape)
        idx = np.searchsorted(edges, np.atleast_1d(u) * edges[-1], side="right")
        idx = np.minimum(idx, len(edges) - 1)
        if shape is None:
            return int(idx[0])
        return idx.reshape(np.shape(u))
