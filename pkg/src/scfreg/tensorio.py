"""Dense tensor container: the ``.scft`` on-disk format.

Layout (all integers little-endian):

    bytes 0..3   magic ``SCFT``
    byte  4      format version (currently 1)
    byte  5      dtype code: 0=f32, 1=f64, 2=u8, 3=i32
    byte  6      ndim (1..8)
    byte  7      reserved, must be 0 (pads the header to 8 bytes)
    next ndim*8  dimension sizes as u64
    rest         raw row-major payload

Volumetric data uses index order (channel, z, y, x); see README.
A sidecar ``<name>.json`` next to ``<name>.scft`` carries string metadata.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimsOverflowError,
    TensorIOError,
    TruncatedError,
    UnsupportedDtypeError,
    VersionMismatchError,
)

MAGIC = b"SCFT"
VERSION = 1
MAX_NDIM = 8

# dtype code <-> little-endian numpy dtype
_CODE_TO_DTYPE = {0: "<f4", 1: "<f8", 2: "u1", 3: "<i4"}
_KIND_TO_CODE = {("f", 4): 0, ("f", 8): 1, ("u", 1): 2, ("i", 4): 3}


def _dtype_code(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    if key not in _KIND_TO_CODE:
        raise UnsupportedDtypeError(
            f"dtype {arr.dtype} not storable; supported: f32, f64, u8, i32"
        )
    return _KIND_TO_CODE[key]


def write_tensor(path, t: np.ndarray) -> None:
    """Write ``t`` to ``path`` in the .scft format, bit-exactly recoverable.

    Accepts any numpy array whose dtype maps onto {f32, f64, u8, i32} and
    whose ndim is 1..8 with all extents >= 1.
    """
    t = np.asarray(t)
    code = _dtype_code(t)
    if not 1 <= t.ndim <= MAX_NDIM:
        raise DimsOverflowError(f"ndim {t.ndim} outside 1..{MAX_NDIM}")
    if any(s < 1 for s in t.shape):
        raise DimsOverflowError(f"non-positive extent in shape {t.shape}")
    header = struct.pack("<4sBBBB", MAGIC, VERSION, code, t.ndim, 0)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_CODE_TO_DTYPE[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload)


def read_tensor(path) -> np.ndarray:
    """Read an .scft file back into a numpy array.

    Validates magic, version, dtype code, dimension sanity and exact payload
    length. The returned array is marked read-only; copy before mutating.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise TruncatedError(f"{path}: file shorter than the 8-byte header")
    magic, version, code, ndim, reserved = struct.unpack("<4sBBBB", raw[:8])
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if code not in _CODE_TO_DTYPE:
        raise UnsupportedDtypeError(f"{path}: unknown dtype code {code}")
    if not 1 <= ndim <= MAX_NDIM:
        raise DimsOverflowError(f"{path}: ndim {ndim} outside 1..{MAX_NDIM}")
    if reserved != 0:
        raise TensorIOError(f"{path}: reserved byte is {reserved}, expected 0")
    dims_end = 8 + 8 * ndim
    if len(raw) < dims_end:
        raise TruncatedError(f"{path}: header truncated in dimension list")
    shape = struct.unpack(f"<{ndim}Q", raw[8:dims_end])
    if any(s < 1 for s in shape):
        raise DimsOverflowError(f"{path}: non-positive extent in {shape}")
    count = 1
    for s in shape:
        count *= s
        if count > 2**62:
            raise DimsOverflowError(f"{path}: element count overflows ({shape})")
    dtype = np.dtype(_CODE_TO_DTYPE[code])
    expected = count * dtype.itemsize
    actual = len(raw) - dims_end
    if actual != expected:
        raise TruncatedError(
            f"{path}: payload is {actual} bytes, header declares {expected}"
        )
    arr = np.frombuffer(raw[dims_end:], dtype=dtype).reshape(shape)
    arr.flags.writeable = False
    return arr


def write_sidecar(path, meta: dict) -> None:
    """Write the ``<name>.json`` metadata convention next to an .scft file."""
    Path(sidecar_path(path)).write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_sidecar(path) -> dict:
    return json.loads(Path(sidecar_path(path)).read_text())


def sidecar_path(path) -> Path:
    """``foo.scft`` -> ``foo.json`` (any other suffix is replaced likewise)."""
    p = Path(path)
    return p.with_suffix(".json") if p.suffix else p.with_name(p.name + ".json")
