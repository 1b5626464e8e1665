"""Portable counter-based PRNG used for every seeded artifact in this package.

The generator is splitmix64 (a 64-bit xorshift-multiply mixer) evaluated in
counter mode: output ``i`` of stream ``seed`` is ``mix64(seed + (i+1)*GAMMA)``.
All arithmetic is modulo 2**64, so sequences are identical on every platform
and the generator vectorizes over numpy uint64 arrays. Doubles are built from
the top 53 bits, giving uniform values in [0, 1).

Streams for independent purposes are derived with `derive`, which hashes a
label into the seed so that e.g. model weights and frame noise never share a
counter sequence.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_DOUBLE_SCALE = float(2.0**-53)

_U64 = np.uint64
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def mix64(x: np.ndarray | int) -> np.ndarray | np.uint64:
    """splitmix64 finalizer: avalanche a 64-bit value (vectorized)."""
    z = np.asarray(x, dtype=_U64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        z = z ^ (z >> _U64(31))
    return z if z.ndim else _U64(z)


def derive(seed: int, label: str, *indices: int) -> int:
    """Derive an independent stream seed from a label and integer indices."""
    h = _U64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for ch in label.encode("utf-8"):
            h = mix64(h ^ _U64(ch))
        for ix in indices:
            h = mix64(h ^ _U64(ix & 0xFFFFFFFFFFFFFFFF))
    return int(h)


def uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """n doubles in [0, 1) from stream ``seed``, starting at counter ``offset``."""
    idx = np.arange(offset + 1, offset + n + 1, dtype=_U64)
    with np.errstate(over="ignore"):
        states = _U64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _GAMMA
    bits = mix64(states)
    return (bits >> _U64(11)).astype(np.float64) * _DOUBLE_SCALE


def symmetric(seed: int, shape: tuple[int, ...], offset: int = 0) -> np.ndarray:
    """Uniform values in [-1, 1) with the given shape."""
    n = int(np.prod(shape)) if shape else 1
    return (uniform(seed, n, offset) * 2.0 - 1.0).reshape(shape)


def matrix(seed: int, rows: int, cols: int, scale: float = 1.0) -> np.ndarray:
    """A seeded (rows, cols) float64 matrix with entries in [-scale, scale)."""
    return symmetric(seed, (rows, cols)) * scale
