"""Binary file formats: feature files and versioned array archives.

Feature file layout (little-endian throughout):
  magic "STARFEAT" (8 bytes), version u32 = 1, count u32, dim u32,
  count*dim float32 payload, count u32 labels.

Array archives back the codebook / head / mixture-bank checkpoints: a magic,
a version, then named float32/int64 arrays.
"""
from __future__ import annotations

import struct

import numpy as np

FEATURE_MAGIC = b"STARFEAT"
FEATURE_VERSION = 1


class FormatError(ValueError):
    """Raised on malformed binary files."""


def write_feature_file(path, features, labels) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    if features.ndim != 2:
        raise FormatError(f"features must be 2-D, got shape {features.shape}")
    count, dim = features.shape
    if labels.shape != (count,):
        raise FormatError(f"labels shape {labels.shape} does not match count {count}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, count, dim))
        f.write(features.tobytes())
        f.write(labels.tobytes())


def load_feature_file(path, num_classes=None):
    """Read a feature file back as (count x dim float32 array, label list)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header")
    if raw[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    version, count, dim = struct.unpack("<III", raw[8:20])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dim == 0 or count == 0:
        raise FormatError(f"{path}: degenerate count/dim ({count}, {dim})")
    need = 20 + 4 * count * dim + 4 * count
    if len(raw) != need:
        raise FormatError(f"{path}: payload length {len(raw)} != expected {need}")
    features = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=20).reshape(count, dim)
    labels = np.frombuffer(raw, dtype="<u4", count=count, offset=20 + 4 * count * dim)
    if num_classes is not None and labels.size and int(labels.max()) >= num_classes:
        raise FormatError(f"{path}: label {int(labels.max())} out of range for {num_classes} classes")
    return features.copy(), [int(x) for x in labels]


# ---------------------------------------------------------------------------
# named-array archives (checkpoints)

_DTYPES = {b"f4": "<f4", b"i8": "<i8"}
_CODES = {"float32": b"f4", "int64": b"i8"}


def write_archive(path, magic: bytes, arrays: dict) -> None:
    """Write named arrays; float arrays as f32 LE, integer arrays as i64 LE."""
    if len(magic) != 8:
        raise FormatError("archive magic must be 8 bytes")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", 1, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype("<f4")
                code = _CODES["float32"]
            else:
                arr = arr.astype("<i8")
                code = _CODES["int64"]
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(code)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def read_archive(path, magic: bytes) -> dict:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != magic:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    version, n = struct.unpack("<II", raw[8:16])
    if version != 1:
        raise FormatError(f"{path}: unsupported archive version {version}")
    arrays = {}
    off = 16
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        code = raw[off:off + 2]
        off += 2
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code!r}")
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = np.dtype(_DTYPES[code])
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(raw, dtype=dt, count=size, offset=off).reshape(shape)
        off += size * dt.itemsize
        arrays[name] = arr.copy()
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    return arrays
