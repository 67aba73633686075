"""Stage seeds derived from one master seed.

A stage seed is the first 8 bytes of BLAKE2b over ``"<master>/<part>/<part>..."``
read as an unsigned little-endian integer. Adding a stage never reshuffles
the streams of the other stages.
"""

from __future__ import annotations

import hashlib


def derive_seed(master: int, *parts) -> int:
    key = "/".join([str(int(master))] + [str(p) for p in parts])
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")
