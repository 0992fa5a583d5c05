"""Bit-exact range coder over static 16-bit CDF tables.

32-bit ``low``/``range`` registers, bytewise renormalisation whenever the range
drops below 2**24, carries propagated into already-emitted bytes. The final
flush emits only as many bytes as are needed to pin a value inside the last
interval; the decoder reads zeros past the end of the payload.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 32
_BOT = 1 << 24
_LOOKAHEAD = 4


class CoderError(ValueError):
    pass


class TruncatedPayload(CoderError):
    pass


def validate_table(cdf: Sequence[int]) -> list[int]:
    cdf = [int(c) for c in cdf]
    if len(cdf) < 2 or cdf[0] != 0 or cdf[-1] != TOTAL:
        raise CoderError(f"CDF table must start at 0 and end at {TOTAL}")
    if any(b <= a for a, b in zip(cdf, cdf[1:])):
        raise CoderError("CDF table must be strictly increasing")
    return cdf


def cross_entropy_bits(symbols: Sequence[int], cdf: Sequence[int]) -> float:
    cdf = np.asarray(cdf, dtype=np.float64)
    s = np.asarray(symbols, dtype=np.int64)
    if s.size == 0:
        return 0.0
    freq = cdf[s + 1] - cdf[s]
    return float(-np.log2(freq / TOTAL).sum())


def range_encode(symbols: Sequence[int], cdf: Sequence[int]) -> bytes:
    cdf = validate_table(cdf)
    n_sym = len(cdf) - 1
    out = bytearray()
    low, rng = 0, _TOP

    def carry():
        i = len(out) - 1
        while out[i] == 0xFF:
            out[i] = 0
            i -= 1
        out[i] += 1

    for s in symbols:
        s = int(s)
        if not 0 <= s < n_sym:
            raise CoderError(f"symbol {s} outside alphabet of {n_sym}")
        r = rng >> PRECISION
        low += r * cdf[s]
        rng = r * (cdf[s + 1] - cdf[s])
        if low >= _TOP:
            low -= _TOP
            carry()
        while rng < _BOT:
            out.append(low >> 24)
            low = (low << 8) & (_TOP - 1)
            rng <<= 8

    # shortest byte string whose zero-padded value lies in [low, low + rng)
    for k in range(5):
        g = 1 << (32 - 8 * k)
        v = -(-low // g) * g
        if v < low + rng:
            break
    if v >= _TOP:
        v -= _TOP
        carry()
    out.extend(((v >> (24 - 8 * i)) & 0xFF) for i in range(k))
    return bytes(out)


def range_decode(payload: bytes, count: int, cdf: Sequence[int]) -> list[int]:
    cdf = validate_table(cdf)
    n = len(payload)
    pos = 0

    def next_byte():
        nonlocal pos
        pos += 1
        return payload[pos - 1] if pos <= n else 0

    d = 0
    for _ in range(_LOOKAHEAD):
        d = (d << 8) | next_byte()
    rng = _TOP
    out = []
    for _ in range(count):
        r = rng >> PRECISION
        q = d // r
        if q >= TOTAL:
            raise CoderError("payload inconsistent with the CDF table")
        s = bisect_right(cdf, q) - 1
        d -= r * cdf[s]
        rng = r * (cdf[s + 1] - cdf[s])
        while rng < _BOT:
            d = (d << 8) | next_byte()
            rng <<= 8
        out.append(s)
    if pos - n > _LOOKAHEAD:
        raise TruncatedPayload(f"decoder ran {pos - n} bytes past a {n}-byte payload")
    return out
