"""Self-describing binary container for generator and classifier weights.

Layout (all integers little-endian)::

    magic      5 bytes   b"IRGM1" (models) or b"IRCF1" (classifiers)
    version    uint16
    hdr_len    uint32
    header     hdr_len bytes of UTF-8 JSON (dims, priors, layer schema)
    blob       float64 little-endian, arrays concatenated in header order

Every array in the blob is declared in the header as ``{"shape": [...]}``
in the order it is stored, so the blob length is fully determined by the
header and truncation is always detectable.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_PREFIX = struct.Struct("<5sHI")


class ModelFormatError(ValueError):
    """Malformed model/classifier file; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def write_container(path, magic: bytes, header: dict, arrays: list[np.ndarray]) -> None:
    header = dict(header)
    header["arrays"] = [list(np.shape(a)) for a in arrays]
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    data = _PREFIX.pack(magic, FORMAT_VERSION, len(hdr)) + hdr + blob
    Path(path).write_bytes(data)


def read_container(path, magic: bytes) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ModelFormatError("magic", "file too short for header prefix")
    got_magic, version, hdr_len = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise ModelFormatError("magic", f"expected {magic!r}, found {got_magic!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError("version", f"unsupported format version {version}")
    start = _PREFIX.size
    if len(data) < start + hdr_len:
        raise ModelFormatError("header", "truncated header")
    try:
        header = json.loads(data[start:start + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError("header", f"unparseable JSON ({exc})") from None
    if not isinstance(header, dict):
        raise ModelFormatError("header", "expected a JSON object")
    shapes = require(header, "arrays", list)
    blob = data[start + hdr_len:]
    arrays = []
    offset = 0
    for i, shape in enumerate(shapes):
        if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise ModelFormatError(f"arrays[{i}]", "bad shape entry")
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(blob):
            raise ModelFormatError("weights", f"blob truncated while reading array {i}")
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(float).reshape(shape)
        arrays.append(arr)
        offset += nbytes
    if offset != len(blob):
        raise ModelFormatError("weights", f"{len(blob) - offset} trailing bytes after weight blob")
    return header, arrays


def require(header: dict, key: str, kind=None):
    if key not in header:
        raise ModelFormatError(key, "missing field")
    value = header[key]
    if kind is not None and not isinstance(value, kind):
        raise ModelFormatError(key, f"expected {getattr(kind, '__name__', kind)}")
    return value
