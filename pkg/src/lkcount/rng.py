"""Deterministic random number generation (splitmix64).

Every random decision in this package flows through :class:`Rng` so that a
seed pins the entire behaviour of a run, independent of platform, thread
count, or library version.  The generator is splitmix64: the state advances
by a fixed odd constant and the output is a bijective mix of the state,
which also makes the stream vectorisable (output n is ``mix(seed + n*GOLDEN)``).
"""

import numpy as np

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# 1/2**53: uniform doubles are (u64 >> 11) * 2**-53, i.e. 53 random mantissa bits
_U53 = 2.0 ** -53


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, *ids: int) -> int:
    """Derive a child seed from a base seed and a path of integer ids.

    Used to hand independent, reproducible streams to samples/epochs/steps
    without sharing generator state across workers.
    """
    s = seed & _MASK
    for i in ids:
        s = _mix((s ^ (i & _MASK)) + GOLDEN & _MASK)
    return s


class Rng:
    """splitmix64 stream with scalar and vectorised access.

    The scalar and array paths produce the identical stream: ``next_u64_array(n)``
    equals n successive ``next_u64()`` calls and leaves the state in the same
    place.  Uniforms are ``(u64 >> 11) * 2**-53`` in [0, 1); normals come from
    Box-Muller on consecutive uniform pairs (cos output first, then sin).
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN) & _MASK
        return _mix(self.state)

    def next_u64_array(self, n: int) -> np.ndarray:
        """n next u64 outputs as a uint64 array, advancing state by n steps."""
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN) & _MASK
        return z

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _U53

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.next_u64_array(n) >> np.uint64(11)).astype(np.float64) * _U53

    def below(self, n: int) -> int:
        """Integer in [0, n) as next_u64 mod n (the shuffle contract)."""
        return self.next_u64() % n

    def randint(self, lo: int, hi: int) -> int:
        """Integer uniform on the inclusive range [lo, hi]."""
        return lo + self.below(hi - lo + 1)

    def normal_array(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on consecutive uniform pairs.

        Pair (u1, u2) yields sqrt(-2 ln u1) * (cos(2 pi u2), sin(2 pi u2)),
        emitted interleaved; a zero u1 is clamped to 2**-53.  An odd n
        consumes a full final pair and discards its sin half.
        """
        if n == 0:
            return np.empty(0, dtype=np.float64)
        m = (n + 1) // 2
        u = self.uniform_array(2 * m)
        u1 = np.maximum(u[0::2], _U53)
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(2.0 * np.pi * u2)
        out[1::2] = r * np.sin(2.0 * np.pi * u2)
        return out[:n]

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates: descending i, j = next_u64 mod (i+1)."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]

    def fork(self, *ids: int) -> "Rng":
        """Independent child stream keyed off the current state and a path."""
        return Rng(derive_seed(self.state, *ids))
