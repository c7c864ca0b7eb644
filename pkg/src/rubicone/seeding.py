"""Sub-seed derivation for reproducible, independent random streams.

A stream seed is derived from a base seed and a path of labels (ints or
strings) by folding each label through the splitmix64 finalizer, so
``derive_seed(base, point, trial)`` gives each sweep point and trial its own
64-bit seed.
"""

from __future__ import annotations

import zlib

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    x = (x + _GOLDEN) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _label(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode()) | (1 << 40)
    return int(part) & MASK64


def derive_seed(base: int, *parts: int | str) -> int:
    h = splitmix64(int(base) & MASK64)
    for part in parts:
        h = splitmix64(h ^ splitmix64(_label(part)))
    return h
