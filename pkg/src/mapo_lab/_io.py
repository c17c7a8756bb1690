"""Binary file helpers shared by datasets and checkpoints."""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

__all__ = ["IntegrityError", "atomic_write", "crc64", "sha256_file"]

# CRC-64/XZ: reflected ECMA-182 polynomial, init and xorout all ones
_POLY = 0xC96C5795D7870F42
_MASK = 0xFFFFFFFFFFFFFFFF


def _make_table() -> list[int]:
    table = []
    for i in range(256):
        crc = i
        for _ in range(8):
            crc = (crc >> 1) ^ _POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _make_table()


class IntegrityError(Exception):
    """A persisted file is truncated, corrupted or has an unsupported version."""


def crc64(data: bytes, crc: int = 0) -> int:
    crc = ~crc & _MASK
    table = _TABLE
    for b in data:
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return ~crc & _MASK


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
