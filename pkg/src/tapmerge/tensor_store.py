"""Checkpoint weight maps and the MKT1 single-file container.

Layout of an MKT1 file::

    bytes 0..3      magic b"MKT1"
    bytes 4..11     u64 LE header length H
    bytes 12..12+H  UTF-8 JSON {name: {"shape": [...], "offset": int, "len_bytes": int}}
    payload         row-major LE float32, tensors packed in lexicographic name order

Offsets are relative to the end of the header.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFiniteError, SchemaMismatchError

MAGIC = b"MKT1"
_PREFIX = struct.Struct("<4sQ")
_F32 = np.dtype("<f4")


def _as_tensor(name: str, value) -> np.ndarray:
    arr = np.array(value, dtype=np.float32, copy=True, order="C")
    if arr.ndim == 0:
        raise ValueError(f"tensor {name!r} must have at least one dimension")
    if any(d <= 0 for d in arr.shape):
        raise ValueError(f"tensor {name!r} has non-positive dimension in shape {list(arr.shape)}")
    arr.flags.writeable = False
    return arr


def check_finite(name: str, arr: np.ndarray) -> None:
    """Raise :class:`NonFiniteError` naming the first bad flat index."""
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = int(np.flatnonzero(bad.ravel())[0])
        raise NonFiniteError(f"non-finite value in tensor {name!r} at index {idx}: {arr.ravel()[idx]}")


class WeightMap(Mapping):
    """Immutable mapping ``name -> float32 ndarray`` iterated in sorted name order."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, object] | Iterable[tuple[str, object]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        data: dict[str, np.ndarray] = {}
        for name, value in items:
            if not isinstance(name, str) or not name:
                raise ValueError("parameter names must be non-empty strings")
            if name in data:
                raise ValueError(f"duplicate parameter name {name!r}")
            data[name] = _as_tensor(name, value)
        self._entries = {k: data[k] for k in sorted(data)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {list(v.shape)}" for k, v in self._entries.items())
        return f"WeightMap({{{inner}}})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightMap):
            return NotImplemented
        return list(self) == list(other) and all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self
        )

    __hash__ = None

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(v.shape)) for k, v in self._entries.items()]

    def digest(self) -> "SchemaDigest":
        return SchemaDigest.of(self)

    def map(self, fn) -> "WeightMap":
        """Apply ``fn(name, array)`` to every tensor, in name order."""
        return WeightMap((k, fn(k, v)) for k, v in self._entries.items())

    def flat(self) -> np.ndarray:
        """All entries concatenated in name order, as float64."""
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel().astype(np.float64) for v in self._entries.values()])

    def check_finite(self) -> None:
        for k, v in self._entries.items():
            check_finite(k, v)


@dataclass(frozen=True)
class SchemaDigest:
    pairs: tuple[tuple[str, tuple[int, ...]], ...]
    hash: int

    @classmethod
    def of(cls, wm: WeightMap) -> "SchemaDigest":
        pairs = tuple(wm.shapes())
        payload = json.dumps([[n, list(s)] for n, s in pairs], separators=(",", ":")).encode()
        h = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
        return cls(pairs, h)

    @property
    def hex(self) -> str:
        return f"{self.hash:016x}"


def validate_compat(maps: list[WeightMap]) -> SchemaDigest:
    """Return the shared schema digest, or raise naming the first differing parameter."""
    if not maps:
        raise ValueError("validate_compat needs at least one weight map")
    ref = maps[0].digest()
    for i, other in enumerate(maps[1:], start=1):
        d = other.digest()
        if d == ref:
            continue
        a, b = dict(ref.pairs), dict(d.pairs)
        for name in sorted(set(a) | set(b)):
            if a.get(name) != b.get(name):
                sa = list(a[name]) if name in a else "missing"
                sb = list(b[name]) if name in b else "missing"
                raise SchemaMismatchError(
                    f"schema mismatch at parameter {name!r}: {sa} (map 0) vs {sb} (map {i})"
                )
    return ref


# -- arithmetic helpers ------------------------------------------------------

def add(a: WeightMap, b: WeightMap) -> WeightMap:
    validate_compat([a, b])
    return WeightMap((k, a[k] + b[k]) for k in a)


def sub(a: WeightMap, b: WeightMap) -> WeightMap:
    validate_compat([a, b])
    return WeightMap((k, a[k] - b[k]) for k in a)


def scale(m: WeightMap, c: float) -> WeightMap:
    return WeightMap((k, np.float32(c) * v) for k, v in m.items())


def zeros_like(m: WeightMap) -> WeightMap:
    return WeightMap((k, np.zeros_like(v)) for k, v in m.items())


# -- serialization -----------------------------------------------------------

def to_bytes(wm: WeightMap) -> bytes:
    header = {}
    chunks = []
    offset = 0
    for name, arr in wm.items():
        check_finite(name, arr)
        raw = arr.astype(_F32, copy=False).tobytes(order="C")
        header[name] = {"shape": list(arr.shape), "offset": offset, "len_bytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(buf: bytes) -> WeightMap:
    if len(buf) < _PREFIX.size:
        raise FormatError("file too short for MKT1 prefix")
    magic, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if hlen > len(buf) - _PREFIX.size:
        raise FormatError(f"header length {hlen} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError("malformed header: expected a JSON object")
    payload = memoryview(buf)[_PREFIX.size + hlen:]
    entries = []
    for name in sorted(header):
        meta = header[name]
        if not name or not isinstance(meta, dict) or set(meta) != {"shape", "offset", "len_bytes"}:
            raise FormatError(f"malformed header entry for {name!r}")
        shape, off, nbytes = meta["shape"], meta["offset"], meta["len_bytes"]
        if (
            not isinstance(shape, list) or not shape
            or not all(isinstance(d, int) and not isinstance(d, bool) and d > 0 for d in shape)
        ):
            raise FormatError(f"malformed shape for tensor {name!r}: {shape!r}")
        if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in (off, nbytes)):
            raise FormatError(f"malformed offset/length for tensor {name!r}")
        if nbytes != 4 * int(np.prod(shape, dtype=object)):
            raise FormatError(f"length mismatch for tensor {name!r}: {nbytes} bytes for shape {shape}")
        if off + nbytes > len(payload):
            raise FormatError(f"truncated tensor {name!r}")
        arr = np.frombuffer(payload[off:off + nbytes], dtype=_F32).reshape(shape)
        check_finite(name, arr)
        entries.append((name, arr))
    return WeightMap(entries)


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(wm: WeightMap, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, to_bytes(wm))


def load_checkpoint(path: str | os.PathLike) -> WeightMap:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
