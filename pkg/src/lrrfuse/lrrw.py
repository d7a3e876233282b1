"""LRRW weight container.

Layout::

    b"LRRW"                    4-byte magic
    version                    1 byte (currently 1)
    manifest_length            uint32, little-endian
    manifest                   UTF-8 JSON
    payload                    little-endian f32 tensors, contiguous, manifest order

The manifest is ``{"metadata": {...}, "tensors": [{"name", "shape",
"dtype", "offset", "nbytes"}, ...]}`` with offsets counted from the start of
the payload.  Files are written to a temporary sibling and renamed into
place, so a failed write never leaves a partial container behind.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, ManifestError, TruncatedPayloadError

MAGIC = b"LRRW"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4")}


def encode(tensors, metadata=None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        if not np.isfinite(data).all():
            raise FormatError(f"tensor {name!r} holds non-finite values")
        raw = data.tobytes()
        entries.append({"name": name, "shape": list(data.shape), "dtype": "f32", "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"metadata": metadata or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    blob = manifest.encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(blob)) + blob + b"".join(chunks)


def decode(buf: bytes):
    """Parse a container; returns ``(OrderedDict name -> float32 array, metadata)``."""
    if len(buf) < 9:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise BadMagicError("not an LRRW container")
        raise TruncatedPayloadError("file ends inside the header")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if buf[4] != VERSION:
        raise FormatError(f"unsupported LRRW version {buf[4]}")
    (mlen,) = struct.unpack("<I", buf[5:9])
    if 9 + mlen > len(buf):
        raise TruncatedPayloadError("file ends inside the manifest")
    try:
        manifest = json.loads(buf[9 : 9 + mlen].decode("utf-8"))
        entries = manifest["tensors"]
        metadata = manifest.get("metadata", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"unreadable manifest: {exc}") from exc
    payload = memoryview(buf)[9 + mlen :]

    out = OrderedDict()
    expected_offset = 0
    for e in entries:
        try:
            name, shape, dtype, offset, nbytes = e["name"], tuple(e["shape"]), e["dtype"], e["offset"], e["nbytes"]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest entry {e!r}") from exc
        if dtype not in _DTYPES:
            raise ManifestError(f"{name}: unsupported dtype {dtype!r}")
        if any((not isinstance(s, int)) or s < 0 for s in shape):
            raise ManifestError(f"{name}: invalid shape {list(shape)}")
        want = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
        if nbytes != want:
            raise ManifestError(f"{name}: shape {list(shape)} needs {want} bytes, manifest declares {nbytes}")
        if offset != expected_offset:
            raise ManifestError(f"{name}: offset {offset} breaks contiguity (expected {expected_offset})")
        if name in out:
            raise ManifestError(f"duplicate tensor name {name!r}")
        if offset + nbytes > len(payload):
            raise TruncatedPayloadError(f"{name}: payload ends at byte {len(payload)}, tensor needs {offset + nbytes}")
        out[name] = np.frombuffer(payload[offset : offset + nbytes], dtype=_DTYPES[dtype]).reshape(shape).copy()
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise ManifestError(f"{len(payload) - expected_offset} trailing payload bytes not described by the manifest")
    return out, metadata


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, tensors, metadata=None) -> None:
    atomic_write_bytes(path, encode(tensors, metadata))


def load(path):
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return decode(buf)
