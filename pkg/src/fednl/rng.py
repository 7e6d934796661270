"""Deterministic pseudo-random generation shared by every component.

All randomness in the project flows through one tiny generator (SplitMix64)
so that a run is reproducible bit-for-bit from a single 64-bit seed, on any
platform, in any driver (single-process simulator or TCP master/clients).

The generator is counter-based: output i depends only on ``seed + i * GOLDEN``,
which lets us produce a block of draws with vectorized numpy while remaining
bit-identical to the scalar path.

Stream derivation conventions (documented here, relied on everywhere):

* per-(client, round) compressor stream: seed ``mix64(run_seed ^ (client_id << 32 | round))``;
  the first draws of that stream are the compressor's index selection, which is
  what allows a receiver to rebuild random index sets from the seed alone.
* dataset shuffle, synthetic generation and the master's participation
  sampling use ``run_seed ^ TAG_*`` bases; the tags live above 2**63 while
  client/round words stay below it, so the streams can never collide.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Stream tags for the non-(client, round) uses of the run seed.  All >= 2**63,
# while (client_id << 32 | round) words are < 2**63, so bases never collide.
TAG_SHUFFLE = 0x8000000000000001
TAG_SYNTH = 0x8000000000000002
TAG_MASTER = 0x8000000000000003


def mix64(z: int) -> int:
    """Finalizer of SplitMix64: a 64-bit bijective scramble."""
    z = (z + _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


class Prg:
    """SplitMix64 sequence starting from a 64-bit seed.

    Scalar draws and bulk (numpy) draws interleave freely and produce the
    same stream: ``u64_block(n)`` is bit-identical to n ``next_u64()`` calls.
    """

    __slots__ = ("_state", "seed0")

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self.seed0 = self._state

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def u64_block(self, n: int) -> np.ndarray:
        """n raw 64-bit draws as a uint64 array (vectorized scalar path)."""
        if n < 0:
            raise ValueError("negative draw count")
        ks = np.uint64(self._state) + np.uint64(_GOLDEN) * np.arange(
            1, n + 1, dtype=np.uint64
        )
        self._state = (self._state + n * _GOLDEN) & _MASK64
        z = ks
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def next_f64(self) -> float:
        """Uniform in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def f64_block(self, n: int) -> np.ndarray:
        """n uniforms in [0, 1), same stream as repeated next_f64()."""
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def randrange(self, bound: int) -> int:
        """Uniform integer in [0, bound) via rejection (no modulo bias).

        Always consumes at least one draw, including for bound == 1.
        """
        if bound <= 0:
            raise ValueError("bound must be positive")
        threshold = (1 << 64) % bound
        while True:
            u = self.next_u64()
            if u >= threshold:
                return u % bound

    def shuffle(self, arr: np.ndarray | list) -> None:
        """In-place Fisher-Yates shuffle (swap i with uniform j <= i)."""
        n = len(arr)
        for i in range(n - 1, 0, -1):
            j = self.randrange(i + 1)
            arr[i], arr[j] = arr[j], arr[i]

    def partial_shuffle_prefix(self, n: int, k: int) -> np.ndarray:
        """First k entries of a Fisher-Yates shuffle of range(n).

        Draws exactly k randranges, so a receiver holding the same seed can
        reproduce the selected k-subset without seeing the other n - k slots.
        """
        if not 0 <= k <= n:
            raise ValueError("need 0 <= k <= n")
        pool = np.arange(n, dtype=np.int64)
        for i in range(k):
            j = i + self.randrange(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()


def derive_round_seed(run_seed: int, client_id: int, rnd: int) -> int:
    """Seed of the per-(client, round) stream used by compressors."""
    if not 0 <= client_id < (1 << 32):
        raise ValueError("client_id out of u32 range")
    if not 0 <= rnd < (1 << 32):
        raise ValueError("round out of u32 range")
    return mix64(run_seed ^ ((client_id << 32) | rnd))


def derive_round_prg(run_seed: int, client_id: int, rnd: int) -> Prg:
    return Prg(derive_round_seed(run_seed, client_id, rnd))


def derive_stream(run_seed: int, tag: int) -> Prg:
    """Named auxiliary stream (shuffle / synthetic data / master sampling)."""
    return Prg(mix64(run_seed ^ tag))
