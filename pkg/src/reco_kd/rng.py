"""Deterministic pseudo-random streams.

All randomness in the package flows through `Stream`, a SplitMix64 generator
used in counter mode so that draw k depends only on (seed, tag, k):

    state_k = base + (k + 1) * 0x9E3779B97F4A7C15            (mod 2**64)
    out_k   = mix(state_k)

where mix is the SplitMix64 finalizer (Steele, Lea, Flood 2014):

    z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27; z *= 0x94D049BB133111EB
    z ^= z >> 31

`base` is mix(seed XOR fnv1a64(tag)), giving independent streams per tag.
Floats take the top 53 bits of out_k: u = (out_k >> 11) * 2**-53 in [0, 1).
Normals use the Box-Muller cosine branch on consecutive uniform pairs:
z = sqrt(-2 ln(1 - u1)) * cos(2 pi u2). Integer draws use floor(u * n) (the
2**-53 modulo bias is irrelevant at the range sizes used here). shuffle is
Fisher-Yates from the back. The whole algorithm is reproducible from this
docstring; numpy is used only as the array container.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer on a uint64 array; unsigned ops wrap silently.
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def derive_seed(seed: int, tag: str) -> int:
    """A new 64-bit seed deterministically derived from (seed, tag)."""
    z = np.array([(int(seed) ^ _fnv1a64(tag)) & _MASK64], dtype=np.uint64)
    return int(_mix(z)[0])


class Stream:
    """One independent random stream identified by (seed, tag)."""

    def __init__(self, seed: int, tag: str = ""):
        self.seed = int(seed) & _MASK64
        self.tag = tag
        self._base = derive_seed(self.seed, tag)
        self._counter = 0

    # -- state (for run manifests / checkpoints) --

    def state(self) -> dict:
        return {"seed": self.seed, "tag": self.tag, "counter": self._counter}

    @classmethod
    def from_state(cls, state: dict) -> "Stream":
        s = cls(state["seed"], state["tag"])
        s._counter = int(state["counter"])
        return s

    # -- raw draws --

    def raw_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        return _mix(np.uint64(self._base) + idx * np.uint64(_GOLDEN))

    # -- distributions --

    def random(self, shape=None) -> "np.ndarray | float":
        """Uniform float64 in [0, 1)."""
        n = 1 if shape is None else int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        if shape is None:
            return float(u[0])
        return u.reshape(shape)

    def uniform(self, low: float, high: float, shape=None):
        u = self.random(shape)
        return low + (high - low) * u

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0):
        n = 1 if shape is None else int(np.prod(shape, dtype=np.int64)) if shape else 1
        u = (self.raw_u64(2 * n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        u1, u2 = u[:n], u[n:]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        out = mean + std * z
        if shape is None:
            return float(out[0])
        return out.reshape(shape)

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError(f"integer() needs n >= 1, got {n}")
        return int(self.random() * n)

    def shuffle(self, seq) -> list:
        """A new list with the elements of seq in Fisher-Yates order."""
        out = list(seq)
        for i in range(len(out) - 1, 0, -1):
            j = self.integer(i + 1)
            out[i], out[j] = out[j], out[i]
        return out
