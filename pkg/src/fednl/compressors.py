"""Matrix compressors for symmetric update deltas.

A client never ships a full d x d Hessian difference.  It packs the upper
triangle into a vector of w = d (d + 1) / 2 coordinates and sends a
compressed view of that vector.  Six kinds are supported:

* ``identity``   - all w coordinates, untouched (baseline);
* ``topk``       - the k entries largest in magnitude (deterministic);
* ``toplek``     - like topk but randomly mixes two adjacent prefix sizes
                   so the expected residual energy is exactly (1 - k/w) of
                   the total (never worse than the random sparsifiers);
* ``randk``      - a uniform random k-subset of coordinates, scaled by w/k
                   (unbiased);
* ``randseqk``   - k consecutive coordinates (mod w) from one random start,
                   scaled by w/k (unbiased, one draw per matrix);
* ``natural``    - stochastic rounding of every coordinate to one of the two
                   bracketing powers of two (unbiased, variance 1/8 t^2).

Energy bookkeeping accounts for symmetry: an off-diagonal packed entry
represents two matrix entries, so it carries weight 2 in every squared-norm
computation (and in the ranking used by ``toplek``, which is what makes its
expected-residual identity hold for the full matrix).

Random kinds draw from a per-(client, round) PRG seeded so the receiver can
rebuild the selected index set from the 64-bit seed alone; the index
selection is always the first use of that PRG.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .rng import Prg


class CompressorKind(str, enum.Enum):
    IDENTITY = "identity"
    TOPK = "topk"
    TOPLEK = "toplek"
    RANDK = "randk"
    RANDSEQK = "randseqk"
    NATURAL = "natural"


_NEEDS_K = {
    CompressorKind.TOPK,
    CompressorKind.TOPLEK,
    CompressorKind.RANDK,
    CompressorKind.RANDSEQK,
}
_RAND_KINDS = {CompressorKind.RANDK, CompressorKind.RANDSEQK}


@dataclass(frozen=True)
class CompressorSpec:
    """Configured compressor: a kind plus its sparsity budget k (if any).

    ``topk_weighted`` switches topk's ranking from raw magnitude to the
    symmetry-weighted energy that toplek always uses.
    """

    kind: CompressorKind
    k: int | None = None
    topk_weighted: bool = False

    def validate(self, w: int) -> None:
        if self.kind in _NEEDS_K:
            if self.k is None:
                raise ValueError(f"compressor {self.kind.value} requires k")
            if not 1 <= self.k <= w:
                raise ValueError(
                    f"k={self.k} out of range [1, {w}] for {self.kind.value}"
                )
        if w <= 0:
            raise ValueError("packed length must be positive")

    def delta_fraction(self, w: int) -> float:
        """Contraction parameter delta for the biased (top) kinds."""
        if self.kind is CompressorKind.IDENTITY:
            return 1.0
        if self.kind in (CompressorKind.TOPK, CompressorKind.TOPLEK):
            return self.k / w
        raise ValueError(f"{self.kind.value} is not a contractive compressor")

    def omega(self, w: int) -> float:
        """Variance parameter omega for the unbiased kinds."""
        if self.kind is CompressorKind.IDENTITY:
            return 0.0
        if self.kind in _RAND_KINDS:
            return w / self.k - 1.0
        if self.kind is CompressorKind.NATURAL:
            return 0.125
        raise ValueError(f"{self.kind.value} is not an unbiased compressor")


@dataclass
class CompressedDelta:
    """Compressed symmetric update, in packed upper-triangle coordinates.

    ``indices`` is None for the dense kinds (identity, natural), where
    ``values`` covers all w coordinates; otherwise indices are strictly
    ascending packed positions aligned with ``values``.  ``seed_tag`` is the
    64-bit PRG seed that regenerates the index set of the random kinds.
    An all-zero input compresses to an empty delta (zero entries).
    """

    kind: CompressorKind
    d: int
    values: np.ndarray
    indices: np.ndarray | None = None
    seed_tag: int | None = None

    @property
    def entry_count(self) -> int:
        return len(self.values)


def _empty_delta(kind: CompressorKind, d: int) -> CompressedDelta:
    return CompressedDelta(
        kind=kind,
        d=d,
        values=np.zeros(0),
        indices=np.zeros(0, dtype=np.uint32),
    )


def _packed_nonzero(m: np.ndarray) -> tuple[np.ndarray, bool]:
    packed = linalg.pack_upper(m)
    if not np.all(np.isfinite(packed)):
        raise ValueError("cannot compress a matrix with non-finite entries")
    return packed, bool(np.any(packed != 0.0))


def rank_order(keys: np.ndarray) -> np.ndarray:
    """Positions sorted by key descending, ties by smaller position first."""
    return np.lexsort((np.arange(len(keys)), -keys))


def topk_positions(packed: np.ndarray, k: int, weights: np.ndarray | None) -> np.ndarray:
    """Ascending positions of the k top-ranked packed entries.

    Ranking is by |value| when ``weights`` is None, otherwise by the
    symmetry-weighted energy ``weights * value**2``.
    """
    key = np.abs(packed) if weights is None else weights * packed * packed
    return np.sort(rank_order(key)[:k])


def compress_identity(m: np.ndarray) -> CompressedDelta:
    packed, nonzero = _packed_nonzero(m)
    if not nonzero:
        return _empty_delta(CompressorKind.IDENTITY, m.shape[0])
    return CompressedDelta(
        kind=CompressorKind.IDENTITY, d=m.shape[0], values=packed.copy()
    )


def compress_topk(m: np.ndarray, k: int, rank_weighted: bool = False) -> CompressedDelta:
    """Keep the k packed entries with largest magnitude (no randomness)."""
    d = m.shape[0]
    packed, nonzero = _packed_nonzero(m)
    if not nonzero:
        return _empty_delta(CompressorKind.TOPK, d)
    weights = linalg.tri_tables(d)[2] if rank_weighted else None
    idx = topk_positions(packed, k, weights)
    return CompressedDelta(
        kind=CompressorKind.TOPK,
        d=d,
        values=packed[idx].copy(),
        indices=idx.astype(np.uint32),
    )


def toplek_plan(sorted_energies: np.ndarray, k: int) -> tuple[int, int, float]:
    """Prefix-size mixing law for toplek.

    Given per-entry energies sorted descending, returns (t_lo, t_hi, p_lo):
    keep the top t_lo entries with probability p_lo, otherwise the top t_hi,
    where t_hi is the smallest prefix whose energy share reaches k / w and
    t_lo = t_hi - 1.  The mix is chosen so the expected kept energy share is
    exactly k / w, hence expected residual exactly (1 - k/w) of the total.
    """
    w = len(sorted_energies)
    total = float(np.sum(sorted_energies))
    if total <= 0.0:
        raise ValueError("toplek plan needs positive total energy")
    target = k / w
    shares = np.cumsum(sorted_energies) / total
    t_hi = int(np.searchsorted(shares, target))
    if t_hi >= k:
        # top-k share is >= k/w mathematically; fp drift can miss it
        return k, k, 1.0
    t_hi += 1  # searchsorted returned the first prefix with share >= target
    t_lo = t_hi - 1
    share_lo = 0.0 if t_lo == 0 else float(shares[t_lo - 1])
    share_hi = float(shares[t_hi - 1])
    if share_hi <= share_lo:
        return t_hi, t_hi, 1.0
    if share_hi <= target:
        return t_hi, t_hi, 1.0
    p_lo = (share_hi - target) / (share_hi - share_lo)
    return t_lo, t_hi, min(max(p_lo, 0.0), 1.0)


def compress_toplek(m: np.ndarray, k: int, prg: Prg) -> CompressedDelta:
    """Top-prefix compressor with expected kept energy exactly k / w.

    Entries are ranked by symmetry-weighted energy.  One uniform draw picks
    between two adjacent prefix sizes; when the top-k share already equals
    k / w exactly, the larger prefix is taken deterministically (the draw is
    still consumed, keeping stream consumption data-independent).
    """
    d = m.shape[0]
    packed, nonzero = _packed_nonzero(m)
    if not nonzero:
        return _empty_delta(CompressorKind.TOPLEK, d)
    weights = linalg.tri_tables(d)[2]
    energy = weights * packed * packed
    order = rank_order(energy)
    t_lo, t_hi, p_lo = toplek_plan(energy[order], k)
    t = t_lo if prg.next_f64() < p_lo else t_hi
    idx = np.sort(order[:t])
    return CompressedDelta(
        kind=CompressorKind.TOPLEK,
        d=d,
        values=packed[idx].copy(),
        indices=idx.astype(np.uint32),
    )


def randk_positions(w: int, k: int, seed: int) -> np.ndarray:
    """Ascending uniform random k-subset of [0, w), rebuilt from a seed."""
    prg = Prg(seed)
    return np.sort(prg.partial_shuffle_prefix(w, k))


def randseqk_positions_from_start(w: int, k: int, start: int) -> np.ndarray:
    """Ascending positions of the k-run starting at ``start`` (mod w)."""
    return np.sort((start + np.arange(k, dtype=np.int64)) % w)


def randseqk_positions(w: int, k: int, seed: int) -> np.ndarray:
    prg = Prg(seed)
    return randseqk_positions_from_start(w, k, prg.randrange(w))


def _compress_rand(
    m: np.ndarray, k: int, prg: Prg, kind: CompressorKind
) -> CompressedDelta:
    d = m.shape[0]
    w = linalg.packed_length(d)
    packed, nonzero = _packed_nonzero(m)
    if not nonzero:
        return _empty_delta(kind, d)
    seed = prg.seed0
    if kind is CompressorKind.RANDK:
        idx = np.sort(prg.partial_shuffle_prefix(w, k))
    else:
        idx = randseqk_positions_from_start(w, k, prg.randrange(w))
    scale = w / k
    return CompressedDelta(
        kind=kind,
        d=d,
        values=packed[idx] * scale,
        indices=idx.astype(np.uint32),
        seed_tag=seed,
    )


def compress_randk(m: np.ndarray, k: int, prg: Prg) -> CompressedDelta:
    """Uniform random k of the w packed entries, scaled by w/k (unbiased).

    Index selection is the first use of ``prg``, so the subset can be
    regenerated from the PRG seed by the receiver.
    """
    return _compress_rand(m, k, prg, CompressorKind.RANDK)


def compress_randseqk(m: np.ndarray, k: int, prg: Prg) -> CompressedDelta:
    """k consecutive packed entries (mod w) from one uniform start, scaled w/k."""
    return _compress_rand(m, k, prg, CompressorKind.RANDSEQK)


_TINY = 2.0**-1022  # smallest normal magnitude
_HUGE = 2.0**1023  # largest representable power of two


def natural_bracket(vals: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(low, high, p_up) of the stochastic power-of-two rounding law.

    Each |v| in [low, high] with low = 2^floor(log2 |v|), high = 2 low,
    and p_up = (|v| - low) / low so the rounding is unbiased.  Magnitudes
    below the normal range mix between 0 and the smallest normal number;
    magnitudes at or above 2^1023 collapse to 2^1023 deterministically.
    """
    mag = np.abs(vals)
    low = np.zeros_like(mag)
    high = np.zeros_like(mag)
    p_up = np.zeros_like(mag)

    normal = (mag >= _TINY) & (mag < _HUGE)
    if np.any(normal):
        _, exp = np.frexp(mag[normal])
        lo = np.ldexp(0.5, exp)
        low[normal] = lo
        high[normal] = np.ldexp(1.0, exp)
        p_up[normal] = (mag[normal] - lo) / lo

    tiny = (mag > 0.0) & (mag < _TINY)
    if np.any(tiny):
        high[tiny] = _TINY
        p_up[tiny] = mag[tiny] / _TINY

    huge = mag >= _HUGE
    if np.any(huge):
        low[huge] = _HUGE
        high[huge] = _HUGE
    return low, high, p_up


def natural_round_array(vals: np.ndarray, prg: Prg) -> np.ndarray:
    """Stochastically round every value to a bracketing power of two.

    Exact powers of two (and zeros) pass through unchanged.  Consumes
    exactly len(vals) uniforms regardless of the data.
    """
    low, high, p_up = natural_bracket(vals)
    u = prg.f64_block(len(vals))
    mag = np.where(u < p_up, high, low)
    # vals < 0 (not signbit) so negative zeros flow through as +0.0
    return np.where(vals < 0.0, -mag, mag)


def compress_natural(m: np.ndarray, prg: Prg) -> CompressedDelta:
    packed, nonzero = _packed_nonzero(m)
    if not nonzero:
        return _empty_delta(CompressorKind.NATURAL, m.shape[0])
    return CompressedDelta(
        kind=CompressorKind.NATURAL,
        d=m.shape[0],
        values=natural_round_array(packed, prg),
    )


def compress(m: np.ndarray, spec: CompressorSpec, prg: Prg) -> CompressedDelta:
    """Dispatch on the configured kind.

    For the random kinds, ``prg`` must be fresh (its seed is embedded in the
    delta so receivers can rebuild the index set).
    """
    w = linalg.packed_length(m.shape[0])
    spec.validate(w)
    if spec.kind is CompressorKind.IDENTITY:
        return compress_identity(m)
    if spec.kind is CompressorKind.TOPK:
        return compress_topk(m, spec.k, rank_weighted=spec.topk_weighted)
    if spec.kind is CompressorKind.TOPLEK:
        return compress_toplek(m, spec.k, prg)
    if spec.kind is CompressorKind.RANDK:
        return compress_randk(m, spec.k, prg)
    if spec.kind is CompressorKind.RANDSEQK:
        return compress_randseqk(m, spec.k, prg)
    if spec.kind is CompressorKind.NATURAL:
        return compress_natural(m, prg)
    raise ValueError(f"unknown compressor kind {spec.kind!r}")


def apply_delta(h: np.ndarray, delta: CompressedDelta, scale: float) -> None:
    """h += scale * (symmetric matrix encoded by delta), in place.

    Keeps h exactly symmetric (mirrors every touched upper entry onto the
    lower triangle).  An empty delta is a no-op.
    """
    d = h.shape[0]
    if delta.d != d:
        raise ValueError(f"delta dimension {delta.d} != matrix dimension {d}")
    if delta.entry_count == 0:
        return
    rows, cols, _ = linalg.tri_tables(d)
    if delta.indices is None:
        h[rows, cols] += scale * delta.values
        linalg.symmetrize_from_upper(h)
        return
    idx = delta.indices
    r = rows[idx]
    c = cols[idx]
    h[r, c] += scale * delta.values
    h[c, r] = h[r, c]


def delta_to_dense(delta: CompressedDelta) -> np.ndarray:
    """The symmetric matrix a delta encodes (reference / test helper)."""
    out = linalg.new_matrix(delta.d)
    apply_delta(out, delta, 1.0)
    return out


def natural_codes_from_values(values: np.ndarray) -> np.ndarray:
    """12-bit wire codes (sign + biased exponent) of signed powers of two."""
    codes = np.zeros(len(values), dtype=np.uint16)
    nz = values != 0.0
    if np.any(nz):
        mag = np.abs(values[nz])
        _, exp = np.frexp(mag)
        biased = exp.astype(np.int64) + 1022  # value = 2^(exp-1)
        if np.any((biased < 1) | (biased > 2046)):
            raise ValueError("natural code exponent out of range")
        sign = (values[nz] < 0).astype(np.uint16)
        codes[nz] = (sign << np.uint16(11)) | biased.astype(np.uint16)
    return codes


def natural_values_from_codes(codes: np.ndarray) -> np.ndarray:
    biased = (codes & np.uint16(0x7FF)).astype(np.int64)
    sign = np.where((codes >> np.uint16(11)) & np.uint16(1), -1.0, 1.0)
    vals = np.where(biased > 0, np.ldexp(1.0, (biased - 1023).astype(np.int32)), 0.0)
    return vals * sign


def pack_codes_12bit(codes: np.ndarray) -> bytes:
    """Pack 12-bit codes, two per 3 bytes, little end first; odd tail uses 2."""
    n = len(codes)
    c = codes.astype(np.uint32)
    pairs = n // 2
    out = np.zeros(pairs * 3 + (2 if n % 2 else 0), dtype=np.uint8)
    if pairs:
        t = c[0 : 2 * pairs : 2] | (c[1 : 2 * pairs : 2] << np.uint32(12))
        out[0 : 3 * pairs : 3] = t & 0xFF
        out[1 : 3 * pairs : 3] = (t >> np.uint32(8)) & 0xFF
        out[2 : 3 * pairs : 3] = (t >> np.uint32(16)) & 0xFF
    if n % 2:
        tail = int(c[-1])
        out[-2] = tail & 0xFF
        out[-1] = (tail >> 8) & 0x0F
    return out.tobytes()


def unpack_codes_12bit(buf: bytes, count: int) -> np.ndarray:
    expected = (12 * count + 7) // 8
    if len(buf) != expected:
        raise ValueError(f"packed code block is {len(buf)} bytes, expected {expected}")
    raw = np.frombuffer(buf, dtype=np.uint8)
    codes = np.zeros(count, dtype=np.uint16)
    pairs = count // 2
    if pairs:
        t = (
            raw[0 : 3 * pairs : 3].astype(np.uint32)
            | (raw[1 : 3 * pairs : 3].astype(np.uint32) << np.uint32(8))
            | (raw[2 : 3 * pairs : 3].astype(np.uint32) << np.uint32(16))
        )
        codes[0 : 2 * pairs : 2] = (t & np.uint32(0xFFF)).astype(np.uint16)
        codes[1 : 2 * pairs : 2] = ((t >> np.uint32(12)) & np.uint32(0xFFF)).astype(
            np.uint16
        )
    if count % 2:
        codes[-1] = int(raw[-2]) | ((int(raw[-1]) & 0x0F) << 8)
    return codes


def wire_size_bytes(delta: CompressedDelta, reconstruct_indices: bool) -> int:
    """Exact payload byte count of a delta block on the wire.

    Dense kinds are fixed-size (identity: 8 per coordinate; natural: 12 bits
    per coordinate, byte-padded).  Explicit sparse entries cost 12 bytes
    (u32 position + f64 value).  Random kinds in reconstruction mode cost an
    8-byte seed plus 8 bytes per value.  Empty deltas cost nothing.
    """
    if delta.entry_count == 0:
        return 0
    w = linalg.packed_length(delta.d)
    if delta.kind is CompressorKind.IDENTITY:
        return 8 * w
    if delta.kind is CompressorKind.NATURAL:
        return (12 * w + 7) // 8
    if delta.kind in _RAND_KINDS and reconstruct_indices:
        return 8 + 8 * delta.entry_count
    return 12 * delta.entry_count
