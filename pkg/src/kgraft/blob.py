"""GRFT tensor blobs.

Layout, all little-endian::

    b"GRFT"           magic
    u16               format version (1)
    u8                dtype code (0 = f32, 1 = f64)
    u8                rank (1..4)
    u64 * rank        extents
    raw data          row-major

Readers always return float64.
"""

import hashlib
import struct

import numpy as np

from .errors import FormatError, ValidationError

MAGIC = b"GRFT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {"f32": 0, "f64": 1}
_HEAD = struct.Struct("<4sHBB")


def encode(arr, dtype="f64"):
    if dtype not in DTYPE_CODES:
        raise ValidationError(f"dtype must be one of {sorted(DTYPE_CODES)}, got {dtype!r}")
    code = DTYPE_CODES[dtype]
    arr = np.asarray(arr)
    if not 1 <= arr.ndim <= 4:
        raise ValidationError(f"blob rank must be 1..4, got {arr.ndim}")
    head = _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode(buf, name="blob"):
    """Parse blob bytes; ``name`` prefixes the field in any FormatError."""
    if len(buf) < _HEAD.size:
        raise FormatError(f"truncated header ({len(buf)} bytes)", f"{name}.header")
    magic, version, code, rank = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", f"{name}.magic")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", f"{name}.version")
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}", f"{name}.dtype")
    if not 1 <= rank <= 4:
        raise FormatError(f"rank {rank} outside 1..4", f"{name}.rank")
    off = _HEAD.size
    if len(buf) < off + 8 * rank:
        raise FormatError("truncated extents", f"{name}.extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    if any(d < 1 for d in shape):
        raise FormatError(f"zero extent in {shape}", f"{name}.extents")
    dt = DTYPES[code]
    want = int(np.prod(shape)) * dt.itemsize
    have = len(buf) - off
    if have != want:
        raise FormatError(f"declared {want} data bytes for shape {shape}, found {have}",
                          f"{name}.data")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).astype(np.float64)


def write(path, arr, dtype="f64"):
    data = encode(arr, dtype)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def read(path, name=None, sha256=None):
    """Load a blob, optionally verifying its sha256 checksum first."""
    from .errors import CorruptionError

    name = name or str(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise FormatError("file missing", name) from None
    if sha256 is not None and hashlib.sha256(data).hexdigest() != sha256:
        raise CorruptionError("checksum mismatch", f"{name}.sha256")
    return decode(data, name)
