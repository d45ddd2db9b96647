from __future__ import annotations

import hashlib
import json
import random
import zlib
from typing import Any


class ValidationError(ValueError):
    """An argument broke an operation's precondition"""


def uniform_from_mean(mean: float, size: float,
                      rng: random.Random = random) -> float:
    return rng.uniform(mean - size, mean + size)


def fmt_size(sz_bytes: int | float) -> str:
    sz_bytes = int(sz_bytes)  # can't have 5.3 of a byte
    if sz_bytes < 10*1000:
        return f'{sz_bytes} B'
    prefs = ('K', 'M', 'G', 'T', 'P', 'E', 'Z', 'Y', 'R', 'Q')
    for i, pref in enumerate(prefs):
        max_threshold = 10_000 * 1000**(i+1)  # eg. max 9999.9 KiB to use KiB
        multiplier = 1024**(i+1)
        if sz_bytes < max_threshold or i == len(prefs) - 1:
            return f'{sz_bytes/multiplier:.1f} {pref}iB'
    raise AssertionError("Unreachable code has been reached")


def derive_seed(seed: int, *parts: int | str) -> int:
    """Stable 32-bit sub-seed for (seed, *parts), independent of PYTHONHASHSEED"""
    key = ':'.join(str(p) for p in (seed, *parts)).encode()
    return zlib.crc32(key) & 0xFFFF_FFFF


def canonical_json(o: Any) -> str:
    return json.dumps(o, sort_keys=True, separators=(',', ':'))


def content_hash(o: Any) -> str:
    """git-style blob hash of the canonical JSON of `o`"""
    data = canonical_json(o).encode()
    return hashlib.sha1(b'blob %d\0' % len(data) + data).hexdigest()
