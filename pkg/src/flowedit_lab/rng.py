"""Counter-based random substreams.

Every random number in the package is a pure function of a key
``(seed, stream)`` and a counter ``(row, step, draw, block)``.  Any single
row of any experiment can therefore be regenerated in isolation, and
batched, serial or parallel evaluation produce identical bits.

The block cipher is Philox4x64-10 (Salmon et al., SC'11), vectorized over
counters.  It is bit-compatible with :class:`numpy.random.Philox`, which the
test-suite uses as an oracle.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_ROUNDS = 10

_TWO_POW_M53 = 2.0**-53
_SHIFT11 = np.uint64(11)


def _mulhilo(a, b):
    """Full 64x64 -> 128 bit product, returned as (hi, lo)."""
    a_lo = a & _MASK32
    a_hi = a >> _SHIFT32
    b_lo = b & _MASK32
    b_hi = b >> _SHIFT32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _SHIFT32) + (lh & _MASK32) + (hl & _MASK32)
    hi = hh + (lh >> _SHIFT32) + (hl >> _SHIFT32) + (mid >> _SHIFT32)
    return hi, a * b


def philox4x64(counter, key):
    """Apply Philox4x64-10 to an array of counters.

    counter: uint64 array of shape (..., 4)
    key: two uint64 words
    """
    ctr = np.asarray(counter, dtype=np.uint64)
    if ctr.shape[-1] != 4:
        raise ValueError("counter must have trailing dimension 4")
    x0, x1, x2, x3 = (ctr[..., j].copy() for j in range(4))
    k0 = np.uint64(key[0])
    k1 = np.uint64(key[1])
    with np.errstate(over="ignore"):
        for r in range(_ROUNDS):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, x0)
            hi1, lo1 = _mulhilo(_M1, x2)
            x0, x1, x2, x3 = hi1 ^ x1 ^ k0, lo1, hi0 ^ x3 ^ k1, lo0
    return np.stack([x0, x1, x2, x3], axis=-1)


def stream_id(name: str) -> int:
    """Stable 32-bit tag for a named stream."""
    return zlib.crc32(name.encode("utf-8"))


def _key(seed: int, stream: str):
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    return (np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream_id(stream)))


def _counters(rows, step, draws, blocks):
    rows = np.asarray(rows, dtype=np.uint64).reshape(-1)
    draws = np.asarray(draws, dtype=np.uint64).reshape(-1)
    blocks = np.arange(blocks, dtype=np.uint64)
    ctr = np.empty((draws.size, rows.size, blocks.size, 4), dtype=np.uint64)
    ctr[..., 0] = rows[None, :, None]
    ctr[..., 1] = np.uint64(step)
    ctr[..., 2] = draws[:, None, None]
    ctr[..., 3] = blocks[None, None, :]
    return ctr


def raw_bits(seed, stream, rows, step=0, draws=(0,), blocks=1):
    """Raw uint64 words, shape (len(draws), len(rows), 4 * blocks)."""
    ctr = _counters(rows, step, draws, blocks)
    out = philox4x64(ctr, _key(seed, stream))
    return out.reshape(ctr.shape[0], ctr.shape[1], 4 * blocks)


def bits_to_unit(bits):
    """Map uint64 words to doubles in the open-closed interval (0, 1]."""
    return ((bits >> _SHIFT11).astype(np.float64) + 1.0) * _TWO_POW_M53


def uniforms(seed, stream, rows, step=0, draws=(0,), width=1):
    """Uniform variates on (0, 1], shape (len(draws), len(rows), width)."""
    blocks = -(-width // 4)
    u = bits_to_unit(raw_bits(seed, stream, rows, step, draws, blocks))
    return u[..., :width]


def normals(seed, stream, rows, step=0, draws=(0,), dim=2):
    """Standard normal variates, shape (len(draws), len(rows), dim).

    Box-Muller on pairs of uniforms: one counter yields exactly four
    normals, so no rejection step ever shifts a row's stream.
    """
    blocks = -(-dim // 4)
    u = bits_to_unit(raw_bits(seed, stream, rows, step, draws, blocks))
    u1 = u[..., 0::2]
    u2 = u[..., 1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.empty(u.shape, dtype=np.float64)
    z[..., 0::2] = radius * np.cos(angle)
    z[..., 1::2] = radius * np.sin(angle)
    return z[..., :dim]
