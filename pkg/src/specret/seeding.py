"""Seed derivation.

Child seeds are derived with the splitmix64 finaliser: the parent seed and
each key are folded in turn as ``state = mix(state ^ key + GOLDEN)``. String
keys are reduced to 64 bits with FNV-1a first. The construction is stable
across platforms and Python versions, which keeps generated datasets
byte-identical on replay.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    z = (x + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def _fnv1a(s: str) -> int:
    h = 0xCBF29CE484222325
    for b in s.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


def derive_seed(seed: int, *keys: int | str) -> int:
    state = splitmix64(int(seed) & _MASK)
    for k in keys:
        k = _fnv1a(k) if isinstance(k, str) else int(k) & _MASK
        state = splitmix64(state ^ k)
    return state
