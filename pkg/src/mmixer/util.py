"""Seed derivation and shared error types."""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration constraint was violated."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite values are required."""


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(root: int, *streams) -> int:
    """Derive an independent child seed from a root seed and stream keys.

    Each key (int or str) is folded in with splitmix64 so that distinct
    (root, keys) pairs give statistically independent streams and the
    mapping is stable across runs and platforms.
    """
    state = _splitmix64(root & _MASK64)
    for key in streams:
        if isinstance(key, str):
            key = int.from_bytes(
                hashlib.blake2b(key.encode(), digest_size=8).digest(), "little"
            )
        state = _splitmix64(state ^ (key & _MASK64))
    return state


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed & _MASK64))
