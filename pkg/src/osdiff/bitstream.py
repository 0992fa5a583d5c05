"""The ``.osdf`` container: fixed big-endian header, per-channel lengths, payloads."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

MAGIC = b"OSDF"
VERSION = 1
# magic, version, width, height, channels, L, t*, seed, lambda id, model hash, crc32
# The crc covers every byte of the stream except itself.
_FIELDS = struct.Struct(">4sBHHBBHQB8s")
_HEADER = struct.Struct(">4sBHHBBHQB8sI")
FIXED_HEADER_BYTES = _HEADER.size


class BitstreamError(ValueError):
    pass


class ModelMismatch(BitstreamError):
    pass


@dataclass
class Header:
    width: int
    height: int
    channels: int
    bound: int
    t_star: int
    seed: int = 0
    lambda_id: int = 0
    model_hash: bytes = b"\0" * 8
    version: int = VERSION


@dataclass
class Bitstream:
    header: Header
    payloads: list[bytes] = field(default_factory=list)


def header_bytes(channels: int) -> int:
    return FIXED_HEADER_BYTES + 4 * channels


def pack_bitstream(header: Header, payloads: list[bytes]) -> bytes:
    if len(payloads) != header.channels:
        raise BitstreamError(f"{len(payloads)} payloads for {header.channels} channels")
    if len(header.model_hash) != 8:
        raise BitstreamError("model hash must be 8 bytes")
    body = b"".join(payloads)
    try:
        head = _FIELDS.pack(MAGIC, header.version, header.width, header.height, header.channels,
                            header.bound, header.t_star, header.seed, header.lambda_id,
                            header.model_hash)
        lengths = struct.pack(f">{header.channels}I", *(len(p) for p in payloads))
    except struct.error as exc:
        raise BitstreamError(f"header field out of range: {exc}") from None
    crc = zlib.crc32(head + lengths + body)
    return head + struct.pack(">I", crc) + lengths + body


def unpack_bitstream(data: bytes, expected_hash: bytes | None = None) -> Bitstream:
    if len(data) < FIXED_HEADER_BYTES:
        raise BitstreamError(f"stream of {len(data)} bytes is shorter than the header")
    (magic, version, width, height, channels, bound, t_star, seed, lambda_id, model_hash,
     crc) = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    if channels == 0:
        raise BitstreamError("header declares zero code channels")
    end = header_bytes(channels)
    if len(data) < end:
        raise BitstreamError("stream truncated inside the length table")
    lengths = struct.unpack_from(f">{channels}I", data, FIXED_HEADER_BYTES)
    if end + sum(lengths) != len(data):
        raise BitstreamError(
            f"declared payload bytes {sum(lengths)} != {len(data) - end} present")
    if zlib.crc32(data[:_FIELDS.size] + data[FIXED_HEADER_BYTES:]) != crc:
        raise BitstreamError("checksum mismatch (corrupted stream)")
    if expected_hash is not None and model_hash != expected_hash:
        raise ModelMismatch("bitstream was produced by a different model file")
    payloads, pos = [], end
    for n in lengths:
        payloads.append(data[pos:pos + n])
        pos += n
    header = Header(width, height, channels, bound, t_star, seed, lambda_id, model_hash, version)
    return Bitstream(header, payloads)
