"""Canonical binary encoding for signed and hashed payloads.

Every transaction, certificate and block in this package is serialized the
same way: fields in declared order, each prefixed with its length as a
4-byte big-endian integer.  The encoding is bit-exact, so digests and
signatures computed over it are reproducible across runs and platforms.
"""

from __future__ import annotations

import hashlib
import struct


def encode_fields(fields: list[bytes]) -> bytes:
    """Concatenate fields, each prefixed with a 4-byte big-endian length."""
    out = bytearray()
    for field in fields:
        out += struct.pack(">I", len(field))
        out += field
    return bytes(out)


def decode_fields(data: bytes) -> list[bytes]:
    """Inverse of :func:`encode_fields`. Raises ValueError on malformed input."""
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ValueError("truncated length prefix")
        (n,) = struct.unpack(">I", data[pos : pos + 4])
        pos += 4
        if pos + n > len(data):
            raise ValueError("field extends past end of buffer")
        fields.append(data[pos : pos + n])
        pos += n
    return fields


def encode_float(x: float) -> bytes:
    """IEEE-754 double, big-endian."""
    return struct.pack(">d", float(x))


def decode_float(b: bytes) -> float:
    return struct.unpack(">d", b)[0]


def encode_int(x: int) -> bytes:
    """Signed 8-byte big-endian integer."""
    return struct.pack(">q", int(x))


def decode_int(b: bytes) -> int:
    return struct.unpack(">q", b)[0]


def encode_str(s: str) -> bytes:
    return s.encode("utf-8")


def digest(data: bytes) -> bytes:
    """256-bit digest used throughout (SHA-256)."""
    return hashlib.sha256(data).digest()


HASH_NAME = "sha256"
DIGEST_SIZE = 32
