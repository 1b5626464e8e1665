"""Minimal named-tensor container: a JSON header plus one raw payload blob.

On disk:

    bytes 0..8    little-endian uint64, byte length of the JSON header
    header        UTF-8 JSON: list of {"name", "dtype", "shape", "byte_offset"}
    payload       the tensors, little-endian row-major, back to back

``dtype`` is "f32" or "f64". Offsets are relative to the payload start, must
not overlap, and the payload length must equal the sum of the tensor sizes.
Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import ConfigError

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def array_digest(*arrays: np.ndarray) -> str:
    """Stable hex digest of arrays' shapes and little-endian bytes."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode())
        h.update(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    return h.hexdigest()


def write_atomic(path: str, data: bytes) -> None:
    """Write bytes to ``path`` via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-container-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    """Serialize named float tensors to the container format."""
    header = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr)
        if a.dtype not in _NAMES:
            a = a.astype(np.float64)
        dtype_name = _NAMES[a.dtype]
        raw = a.astype(_DTYPES[dtype_name], copy=False).tobytes()
        header.append(
            {
                "name": name,
                "dtype": dtype_name,
                "shape": list(a.shape),
                "byte_offset": offset,
            }
        )
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    write_atomic(path, struct.pack("<Q", len(blob)) + blob + b"".join(chunks))


def load_tensors(path: str) -> dict[str, np.ndarray]:
    """Load a container, validating offsets and total payload length."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise ConfigError(f"{path}: truncated container")
    (header_len,) = struct.unpack("<Q", data[:8])
    header_end = 8 + header_len
    if header_end > len(data):
        raise ConfigError(f"{path}: header length exceeds file size")
    try:
        header = json.loads(data[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: bad container header: {e}") from e
    payload = data[header_end:]

    spans = []
    out: dict[str, np.ndarray] = {}
    for entry in header:
        try:
            name = entry["name"]
            dtype = _DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["byte_offset"])
        except (KeyError, TypeError) as e:
            raise ConfigError(f"{path}: malformed header entry {entry}") from e
        nbytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        spans.append((offset, offset + nbytes, name))
        if offset + nbytes > len(payload):
            raise ConfigError(f"{path}: tensor {name!r} extends past payload")
        flat = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        out[name] = flat.reshape(shape).copy()

    spans.sort()
    for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ConfigError(f"{path}: tensors {an!r} and {bn!r} overlap")
    total = sum(b - a for a, b, _ in spans)
    if total != len(payload):
        raise ConfigError(
            f"{path}: payload is {len(payload)} bytes, tensors cover {total}"
        )
    return out
