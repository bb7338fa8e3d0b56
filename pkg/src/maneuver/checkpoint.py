"""Binary checkpoint container: JSON header + raw little-endian payloads.

Layout: an 8-byte little-endian header length, the UTF-8 JSON header, then
the tensor payloads back to back. The header carries a format version, an
optional metadata dict, and a name-sorted tensor directory of dtype, shape,
and byte offset (relative to the end of the header). Writing is fully
deterministic, so identical state produces identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    directory = {}
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        directory[name] = {
            "dtype": arr.dtype.str.lstrip("<>=|"),
            "shape": list(arr.shape),
            "offset": offset,
        }
        payloads.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in payloads:
            f.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            (hlen,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(hlen).decode("utf-8"))
            body = f.read()
    except (OSError, struct.error, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataError(f"unreadable checkpoint {path}: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version in {path}: "
                        f"{header.get('format_version')!r}")
    tensors = {}
    for name, entry in header["tensors"].items():
        dt = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * dt.itemsize
        if end > len(body):
            raise DataError(f"checkpoint {path} truncated at tensor {name!r}")
        tensors[name] = np.frombuffer(body[start:end], dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return tensors, header.get("meta", {})
