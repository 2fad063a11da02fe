"""Versioned binary snapshot container.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"NSWSNAP\\0"
    8       4     format version (uint32, currently 1)
    12      4     byte-order mark 0x01020304 (uint32)
    16      8     manifest length M (uint64)
    24      M     manifest, UTF-8 JSON with sorted keys
    24+M    ...   blobs, concatenated

The manifest is ``{"meta": {...}, "blobs": [{"name", "dtype", "shape",
"offset", "nbytes"}, ...]}``. Offsets are relative to the start of the
blob section; every blob is stored as little-endian float64 (``<f8``).
Serialization is canonical, so save -> load -> save is byte-identical.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError

MAGIC = b"NSWSNAP\0"
VERSION = 1
BOM = 0x01020304
_HEAD = struct.Struct("<8sIIQ")


@dataclass
class Snapshot:
    arrays: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_bytes(self):
        blobs = []
        offset = 0
        chunks = []
        for name, arr in self.arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            blobs.append({"name": name, "dtype": "<f8", "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
        manifest = json.dumps({"meta": self.meta, "blobs": blobs}, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _HEAD.pack(MAGIC, VERSION, BOM, len(manifest)) + manifest + b"".join(chunks)

    @classmethod
    def from_bytes(cls, raw):
        if len(raw) < _HEAD.size:
            raise ParseError("snapshot truncated before header end")
        magic, version, bom, mlen = _HEAD.unpack_from(raw)
        if magic != MAGIC:
            raise ParseError(f"bad snapshot magic {magic!r}")
        if bom != BOM:
            raise ParseError("snapshot byte-order mark mismatch")
        if version != VERSION:
            raise ParseError(f"unsupported snapshot version {version}")
        start = _HEAD.size + mlen
        if len(raw) < start:
            raise ParseError("snapshot truncated inside manifest")
        try:
            manifest = json.loads(raw[_HEAD.size:start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"corrupt snapshot manifest: {exc}") from None
        arrays = {}
        for blob in manifest["blobs"]:
            lo = start + blob["offset"]
            hi = lo + blob["nbytes"]
            if hi > len(raw):
                raise ParseError(f"snapshot blob {blob['name']!r} truncated")
            arr = np.frombuffer(raw[lo:hi], dtype=blob["dtype"]).astype(np.float64)
            arrays[blob["name"]] = arr.reshape(blob["shape"])
        return cls(arrays, manifest["meta"])

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
