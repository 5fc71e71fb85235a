"""Counter-based per-site randomness.

Every lattice site owns an independent stream of 64-bit words produced by
Philox4x64-10 keyed on ``(global_seed, stream_id)``.  The counter encodes the
site coordinates and a block index, so the variables attached to a site do
not depend on which other sites are realized, on their order, or on the
number of worker threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .errors import ConfigurationError

MAX_DIM = 6
_MASK32 = 0xFFFFFFFF

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)


@dataclass(frozen=True)
class SiteRandomness:
    global_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("global_seed", "stream_id"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0 or v >= 2**64:
                raise ConfigurationError(f"{name} must be an integer in [0, 2**64), got {v!r}")

    def with_stream(self, stream_id: int) -> "SiteRandomness":
        return SiteRandomness(self.global_seed, stream_id)

    @property
    def key(self) -> tuple[int, int]:
        return int(self.global_seed), int(self.stream_id)


@nb.njit(cache=True, inline="always")
def _mulhilo(a, b):
    lo = a * b
    m32 = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    a_lo = a & m32
    a_hi = a >> s32
    b_lo = b & m32
    b_hi = b >> s32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> s32) + (lh & m32) + (hl & m32)
    hi = hh + (lh >> s32) + (hl >> s32) + (mid >> s32)
    return hi, lo


@nb.njit(cache=True)
def _philox_block(c0, c1, c2, c3, k0, k1):
    for r in range(10):
        if r > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@nb.njit(cache=True, nogil=True)
def _site_words(packed, tag, n_blocks, k0, k1, out):
    n = packed.shape[0]
    for s in range(n):
        for b in range(n_blocks):
            c3 = tag | np.uint64(b)
            r0, r1, r2, r3 = _philox_block(packed[s, 0], packed[s, 1], packed[s, 2], c3, k0, k1)
            out[s, 4 * b] = r0
            out[s, 4 * b + 1] = r1
            out[s, 4 * b + 2] = r2
            out[s, 4 * b + 3] = r3


def philox_block(counter, key) -> np.ndarray:
    """One Philox4x64-10 output block, exposed for cross-checking."""
    c = [np.uint64(int(v) & 0xFFFFFFFFFFFFFFFF) for v in counter]
    k = [np.uint64(int(v) & 0xFFFFFFFFFFFFFFFF) for v in key]
    return np.array(_philox_block(c[0], c[1], c[2], c[3], k[0], k[1]), dtype=np.uint64)


def _pack_sites(sites: np.ndarray) -> np.ndarray:
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim != 2:
        raise ConfigurationError("sites must be a 2-d array of integer coordinates")
    n, d = sites.shape
    if d > MAX_DIM:
        raise ConfigurationError(f"per-site streams support at most {MAX_DIM} dimensions")
    if n and (sites.min() < -(2**31) or sites.max() >= 2**31):
        raise ConfigurationError("site coordinates must fit in 32 bits")
    padded = np.zeros((n, MAX_DIM), dtype=np.uint64)
    padded[:, :d] = (sites & _MASK32).astype(np.uint64)
    packed = (padded[:, 0::2] << np.uint64(32)) | padded[:, 1::2]
    return np.ascontiguousarray(packed)


def site_words(sites, count: int, rng: SiteRandomness, offset: int = 0) -> np.ndarray:
    """``count`` raw 64-bit words per site, shape ``(n, count)``.

    ``offset`` selects a disjoint range of blocks (units of 4 words), so a
    caller can draw further variables for the same site later.
    """
    sites = np.asarray(sites, dtype=np.int64)
    if sites.ndim == 1:
        sites = sites[:, None]
    packed = _pack_sites(sites)
    d = sites.shape[1]
    n_blocks = -(-count // 4)
    if offset < 0 or offset + n_blocks >= 2**24:
        raise ConfigurationError("block offset out of range")
    # dimension and block offset live in the high half of the fourth counter word
    tag = np.uint64((d << 56) | (offset << 32))
    out = np.empty((sites.shape[0], 4 * n_blocks), dtype=np.uint64)
    k0, k1 = (np.uint64(v) for v in rng.key)
    _site_words(packed, tag, n_blocks, k0, k1, out)
    return out[:, :count]


def words_to_uniform(words: np.ndarray) -> np.ndarray:
    """Map 64-bit words to doubles strictly inside (0, 1)."""
    # 52 bits plus a half step keeps both ends exactly representable
    return ((words >> np.uint64(12)).astype(np.float64) + 0.5) * 2.0**-52


def site_uniforms(sites, count: int, rng: SiteRandomness, offset: int = 0) -> np.ndarray:
    return words_to_uniform(site_words(sites, count, rng, offset))


def replicate_seed(seed: int, *tags: int) -> int:
    """A 64-bit seed derived from ``seed`` and a tuple of integer tags."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(t) for t in tags))
    return int(ss.generate_state(1, np.uint64)[0])


def replicate_generator(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(t) for t in tags)))
