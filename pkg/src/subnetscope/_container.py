"""Binary container shared by the model, dataset and adversarial-cache files.

Layout: 4 magic bytes, u32 LE version, u64 LE header length, UTF-8 JSON
header, raw payload.  Offsets recorded in headers are relative to the
payload start.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class FormatError(ValueError):
    """Base class for malformed artifact files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class LayoutError(FormatError):
    """Header directory is inconsistent with itself or the payload."""


def write_container(path, magic: bytes, header: dict, payload: bytes) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, VERSION, len(head)))
        fh.write(head)
        fh.write(payload)


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        if raw[:4] != magic[: len(raw[:4])]:
            raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
        raise TruncatedError(f"{path}: file shorter than the fixed prefix")
    got, version, hlen = _PREFIX.unpack_from(raw)
    if got != magic:
        raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported version {version}, expected {VERSION}")
    start = _PREFIX.size + hlen
    if start > len(raw):
        raise TruncatedError(f"{path}: header length {hlen} runs past end of file")
    try:
        header = json.loads(raw[_PREFIX.size:start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LayoutError(f"{path}: header is not valid JSON ({exc})") from None
    return header, raw[start:]


def pack_arrays(arrays: dict[str, np.ndarray], dtype: str) -> tuple[list[dict], bytes]:
    """Serialize arrays back to back; returns the directory and the bytes."""
    directory, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        blob = np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()
        directory.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "dtype": dtype})
        chunks.append(blob)
        offset += len(blob)
    return directory, b"".join(chunks)


def unpack_arrays(directory: list[dict], payload: bytes, path="") -> dict[str, np.ndarray]:
    out = {}
    spans = []
    for entry in directory:
        try:
            shape = tuple(int(d) for d in entry["shape"])
            offset = int(entry["offset"])
            dt = np.dtype(entry.get("dtype", "f4")).newbyteorder("<")
        except (KeyError, TypeError, ValueError):
            raise LayoutError(f"{path}: malformed directory entry {entry!r}") from None
        if offset < 0 or any(d < 0 for d in shape):
            raise LayoutError(f"{path}: negative offset or dimension in {entry['name']!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + nbytes > len(payload):
            raise TruncatedError(
                f"{path}: tensor {entry['name']!r} needs bytes [{offset}, {offset + nbytes}) "
                f"but payload has {len(payload)}"
            )
        spans.append((offset, offset + nbytes, entry["name"]))
        out[entry["name"]] = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=offset).reshape(shape)
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise LayoutError(f"{path}: tensors {a!r} and {b!r} overlap in the payload")
    return out
