"""Parameter maps and the ABM-CKPT v1 binary checkpoint format.

Layout (all integers little-endian)::

    bytes 0..3     magic b"ABCK"
    bytes 4..7     u32 version (= 1)
    bytes 8..15    u64 header length H
    bytes 16..16+H UTF-8 JSON header
    bytes 16+H..   data region: row-major little-endian f32 payloads, no padding

The header maps each tensor name to ``{"dtype": "f32", "shape": [...],
"offset": ..., "nbytes": ...}`` (offsets relative to the data region) and
holds string metadata under ``"__meta__"``. Tensors are written in
lexicographic name order and the JSON is emitted with sorted keys and no
whitespace, so equal maps always produce identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    IncompatibleModelsError,
    MalformedHeaderError,
    NonFiniteError,
    NonFinitePayloadError,
    OffsetOverrunError,
    VersionMismatchError,
)
from .tensor import as_tensor

MAGIC = b"ABCK"
VERSION = 1
META_KEY = "__meta__"
_PREAMBLE = struct.Struct("<4sIQ")


class ParameterMap(Mapping):
    """Immutable, name-sorted mapping of parameter name to float32 tensor.

    ``meta`` carries free-form string metadata (stage tag, seed, parent hash).
    """

    def __init__(self, tensors: Mapping | None = None, meta: Mapping | None = None):
        tensors = dict(tensors or {})
        items = {}
        for name in sorted(tensors):
            if not isinstance(name, str) or not name:
                raise ValueError(f"parameter names must be nonempty strings, got {name!r}")
            if name == META_KEY:
                raise ValueError(f"{META_KEY!r} is reserved for metadata")
            items[name] = as_tensor(tensors[name])
        self._tensors = items
        self.meta = {str(k): str(v) for k, v in sorted(dict(meta or {}).items())}

    def __getitem__(self, name):
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def __repr__(self):
        shapes = ", ".join(f"{k}{list(v.shape)}" for k, v in self._tensors.items())
        return f"ParameterMap({shapes})"

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._tensors.items()}

    def to_f64(self) -> dict[str, np.ndarray]:
        """Writable float64 copies, the working precision for training."""
        return {k: v.astype(np.float64) for k, v in self._tensors.items()}

    def with_meta(self, **meta) -> "ParameterMap":
        return ParameterMap(self._tensors, {**self.meta, **meta})

    def equals(self, other: "ParameterMap") -> bool:
        """Bitwise equality of names, shapes and payloads (metadata ignored)."""
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )

    def digest(self) -> str:
        """SHA-256 of the canonical serialized form."""
        return hashlib.sha256(to_bytes(self)).hexdigest()


def to_bytes(pmap: ParameterMap) -> bytes:
    header: dict = {}
    chunks = []
    offset = 0
    for name, t in pmap.items():
        payload = np.ascontiguousarray(t, dtype="<f4").tobytes()
        header[name] = {"dtype": "f32", "shape": list(t.shape), "offset": offset,
                        "nbytes": len(payload)}
        chunks.append(payload)
        offset += len(payload)
    header[META_KEY] = dict(pmap.meta)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":"),
                        ensure_ascii=False).encode("utf-8")
    return _PREAMBLE.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(buf: bytes) -> ParameterMap:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _PREAMBLE.size:
        raise OffsetOverrunError("file shorter than the fixed 16-byte preamble")
    _, version, hlen = _PREAMBLE.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    start = _PREAMBLE.size
    if hlen > len(buf) - start:
        raise OffsetOverrunError(f"header length {hlen} overruns file of {len(buf)} bytes")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError("header must be a JSON object")
    meta = header.pop(META_KEY, {})
    if not isinstance(meta, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in meta.items()):
        raise MalformedHeaderError("__meta__ must map strings to strings")

    data = memoryview(buf)[start + hlen:]
    tensors = {}
    expected = 0
    for name, entry in header.items():
        try:
            dtype, shape = entry["dtype"], [int(s) for s in entry["shape"]]
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"bad entry for {name!r}: {exc}") from exc
        if dtype != "f32":
            raise MalformedHeaderError(f"{name!r}: unsupported dtype {dtype!r}")
        if any(s < 0 for s in shape) or offset < 0:
            raise MalformedHeaderError(f"{name!r}: negative shape or offset")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise MalformedHeaderError(f"{name!r}: nbytes {nbytes} disagrees with shape {shape}")
        if offset + nbytes > len(data):
            raise OffsetOverrunError(
                f"{name!r}: bytes [{offset}, {offset + nbytes}) overrun data region of {len(data)}")
        arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f4").reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NonFinitePayloadError(f"{name!r}: payload contains NaN or Inf")
        tensors[name] = arr.astype(np.float32)
        expected += nbytes
    if expected != len(data):
        raise OffsetOverrunError(
            f"data region holds {len(data)} bytes but the header accounts for {expected}")
    return ParameterMap(tensors, meta)


def write_checkpoint(pmap: ParameterMap, path) -> int:
    """Write ``pmap`` to ``path`` and return the number of bytes written."""
    buf = to_bytes(pmap)
    try:
        with open(path, "wb") as fh:
            fh.write(buf)
    except OSError as exc:
        raise CheckpointError(f"cannot write {os.fspath(path)}: {exc}") from exc
    return len(buf)


def read_checkpoint(path) -> ParameterMap:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {os.fspath(path)}: {exc}") from exc
    return from_bytes(buf)


@dataclass
class CompatibilityReport:
    compatible: bool
    missing: dict[str, list[int]] = field(default_factory=dict)
    shape_mismatches: dict[str, list[tuple]] = field(default_factory=dict)

    def describe(self) -> str:
        if self.compatible:
            return "compatible"
        lines = []
        for name, idx in sorted(self.missing.items()):
            lines.append(f"{name}: missing from map(s) {idx}")
        for name, shapes in sorted(self.shape_mismatches.items()):
            lines.append(f"{name}: shapes differ {shapes}")
        return "; ".join(lines)

    def raise_for_errors(self) -> None:
        if not self.compatible:
            raise IncompatibleModelsError(self.describe())


def validate_compatibility(maps) -> CompatibilityReport:
    """Check that all maps share the same parameter names and shapes.

    ``missing`` lists, for every name absent from some map, the indices of
    the maps lacking it. ``shape_mismatches`` lists every map's shape for each
    name whose shapes disagree.
    """
    maps = list(maps)
    if len(maps) < 2:
        raise ValueError("validate_compatibility needs at least two maps")
    names = sorted(set().union(*(set(m) for m in maps)))
    missing, mismatched = {}, {}
    for name in names:
        absent = [i for i, m in enumerate(maps) if name not in m]
        if absent:
            missing[name] = absent
            continue
        shapes = [tuple(np.shape(m[name])) for m in maps]
        if len(set(shapes)) > 1:
            mismatched[name] = shapes
    return CompatibilityReport(not missing and not mismatched, missing, mismatched)


def check_finite(arrays: Mapping) -> None:
    for name, a in arrays.items():
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"{name!r} contains NaN or Inf")
