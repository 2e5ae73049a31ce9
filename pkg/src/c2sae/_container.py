"""Binary container shared by dataset and checkpoint files.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header,
then the raw payload.  The header must carry ``version`` and
``payload_bytes``.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


_LEN = struct.Struct("<I")


def write_container(path, magic: bytes, header: dict, blobs: list[np.ndarray]) -> None:
    assert len(magic) == 8
    payload = [np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blobs]
    header = dict(header, payload_bytes=sum(len(p) for p in payload))
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_LEN.pack(len(raw)))
        fh.write(raw)
        for p in payload:
            fh.write(p)


def read_container(path, magic: bytes, version: int) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != magic:
        raise BadMagicError(f"{path}: bad magic {data[:8]!r}, expected {magic!r}")
    if len(data) < 12:
        raise TruncatedPayloadError(f"{path}: file ends inside the header length field")
    (n,) = _LEN.unpack_from(data, 8)
    if len(data) < 12 + n:
        raise TruncatedPayloadError(f"{path}: file ends inside the header")
    try:
        header = json.loads(data[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != version:
        raise VersionMismatchError(f"{path}: version {header.get('version')!r}, expected {version}")
    payload = data[12 + n :]
    if len(payload) != header.get("payload_bytes"):
        raise TruncatedPayloadError(
            f"{path}: truncated payload, header declares {header.get('payload_bytes')} bytes, found {len(payload)}"
        )
    return header, payload


def take_f32(payload: bytes, offset: int, shape) -> tuple[np.ndarray, int]:
    count = int(np.prod(shape))
    end = offset + 4 * count
    if end > len(payload):
        raise TruncatedPayloadError("truncated payload: shorter than the declared array shapes")
    arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
    return arr.astype(np.float32), end
