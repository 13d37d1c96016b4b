"""Round-trip and header-validation tests for the .scft container."""

import struct

import numpy as np
import pytest

from scfreg import tensorio
from scfreg.errors import (
    BadMagicError,
    DimsOverflowError,
    TruncatedError,
    UnsupportedDtypeError,
    VersionMismatchError,
)

DTYPES = [np.float32, np.float64, np.uint8, np.int32]


def _random_tensor(rng):
    dtype = DTYPES[rng.integers(len(DTYPES))]
    ndim = int(rng.integers(1, 9))
    shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
    if np.issubdtype(dtype, np.floating):
        data = rng.standard_normal(shape).astype(dtype)
    else:
        data = rng.integers(0, 200, size=shape).astype(dtype)
    return data


def test_f64_2x2_file_size(tmp_path):
    # 8-byte header + 2 dims * 8 + 4 values * 8 = 56 bytes
    p = tmp_path / "t.scft"
    tensorio.write_tensor(p, np.zeros((2, 2), dtype=np.float64))
    assert p.stat().st_size == 56


def test_u8_payload_bytes(tmp_path):
    p = tmp_path / "t.scft"
    tensorio.write_tensor(p, np.array([1, 2, 3], dtype=np.uint8))
    raw = p.read_bytes()
    assert len(raw) == 16 + 3
    assert raw[:4] == b"SCFT"
    assert raw[16:] == bytes([1, 2, 3])


def test_roundtrip_identity(tmp_path):
    rng = np.random.default_rng(7)
    for i in range(50):
        t = _random_tensor(rng)
        p = tmp_path / f"t{i}.scft"
        tensorio.write_tensor(p, t)
        back = tensorio.read_tensor(p)
        assert back.dtype == t.dtype
        assert back.shape == t.shape
        assert np.array_equal(back, t)


def test_read_is_readonly(tmp_path):
    p = tmp_path / "t.scft"
    tensorio.write_tensor(p, np.arange(4, dtype=np.int32))
    back = tensorio.read_tensor(p)
    with pytest.raises(ValueError):
        back[0] = 1


def test_bad_magic(tmp_path):
    p = tmp_path / "t.scft"
    tensorio.write_tensor(p, np.zeros(3, dtype=np.float32))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        tensorio.read_tensor(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "t.scft"
    tensorio.write_tensor(p, np.zeros(3, dtype=np.float32))
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        tensorio.read_tensor(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.scft"
    tensorio.write_tensor(p, np.zeros(3, dtype=np.float32))
    raw = p.read_bytes()
    p.write_bytes(raw[:-1])
    with pytest.raises(TruncatedError):
        tensorio.read_tensor(p)


def test_trailing_garbage_rejected(tmp_path):
    p = tmp_path / "t.scft"
    tensorio.write_tensor(p, np.zeros(3, dtype=np.float32))
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(TruncatedError):
        tensorio.read_tensor(p)


def test_dims_overflow(tmp_path):
    p = tmp_path / "t.scft"
    header = struct.pack("<4sBBBB", b"SCFT", 1, 0, 2, 0)
    dims = struct.pack("<2Q", 2**40, 2**40)
    p.write_bytes(header + dims)
    with pytest.raises(DimsOverflowError):
        tensorio.read_tensor(p)


def test_unsupported_dtype_write(tmp_path):
    with pytest.raises(UnsupportedDtypeError):
        tensorio.write_tensor(tmp_path / "t.scft", np.zeros(3, dtype=np.complex128))


def test_unsupported_dtype_code_read(tmp_path):
    p = tmp_path / "t.scft"
    header = struct.pack("<4sBBBB", b"SCFT", 1, 9, 1, 0)
    p.write_bytes(header + struct.pack("<Q", 1) + b"\x00" * 8)
    with pytest.raises(UnsupportedDtypeError):
        tensorio.read_tensor(p)


def test_ndim_limits(tmp_path):
    with pytest.raises(DimsOverflowError):
        tensorio.write_tensor(tmp_path / "t.scft", np.zeros((1,) * 9, dtype=np.float32))


def test_endianness_is_fixed_little(tmp_path):
    # A big-endian input array must serialize to the same bytes as its
    # little-endian equivalent.
    p1, p2 = tmp_path / "a.scft", tmp_path / "b.scft"
    le = np.array([1.5, -2.25], dtype="<f8")
    be = le.astype(">f8")
    tensorio.write_tensor(p1, le)
    tensorio.write_tensor(p2, be)
    assert p1.read_bytes() == p2.read_bytes()
    assert tensorio.read_tensor(p2).dtype == np.dtype("<f8")


def test_sidecar_roundtrip(tmp_path):
    p = tmp_path / "emb.scft"
    meta = {"labels": ["liver", "spleen"], "encoder": "one-hot"}
    tensorio.write_sidecar(p, meta)
    assert (tmp_path / "emb.json").exists()
    assert tensorio.read_sidecar(p) == meta
