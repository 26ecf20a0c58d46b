"""Binary formats: MFPC cubes, MFLB label rasters and MFST model checkpoints.

All integers are little-endian u32, floats little-endian f32, labels u16.
"""

import struct

import numpy as np

from .data import N_FEATURES, PolSarCube

MFPC_MAGIC = b"MFPC"
MFLB_MAGIC = b"MFLB"
MFST_MAGIC = b"MFST"
VERSION = 1
MAX_DIM = 1 << 20


class FormatError(ValueError):
    """Malformed or truncated file."""


def _read_u32s(buf, offset, n, what):
    end = offset + 4 * n
    if len(buf) < end:
        raise FormatError(f"truncated {what} header: need {end} bytes, have {len(buf)}")
    return struct.unpack_from(f"<{n}I", buf, offset), end


def _check_magic(buf, magic):
    if buf[:4] != magic:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {magic!r}")


# ---------------------------------------------------------------------------
# MFPC cube
# ---------------------------------------------------------------------------


def cube_to_bytes(cube):
    K, _, H, W = cube.bands.shape
    head = MFPC_MAGIC + struct.pack("<5I", VERSION, K, H, W, cube.n_classes)
    body = np.ascontiguousarray(cube.bands, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(cube.labels, dtype="<u2").tobytes()
    return head + body + labels


def cube_from_bytes(buf):
    buf = memoryview(buf)
    _check_magic(buf, MFPC_MAGIC)
    (version, K, H, W, C), off = _read_u32s(buf, 4, 5, "MFPC")
    if version != VERSION:
        raise FormatError(f"unsupported MFPC version {version}")
    for name, v in (("K", K), ("H", H), ("W", W), ("C", C)):
        if v == 0 or v > MAX_DIM:
            raise FormatError(f"MFPC dimension {name}={v} out of range")
    band_bytes = N_FEATURES * H * W * 4
    have = len(buf) - off
    need = K * band_bytes + H * W * 2
    if have < need:
        full = have // band_bytes if band_bytes else 0
        raise FormatError(
            f"truncated MFPC payload: header advertises K={K} bands of {H}x{W} "
            f"but payload holds {min(full, K)} complete band(s) and {have} of {need} bytes"
        )
    if have > need:
        raise FormatError(f"MFPC payload has {have - need} trailing bytes")
    bands = np.frombuffer(buf, dtype="<f4", count=K * N_FEATURES * H * W, offset=off)
    bands = bands.reshape(K, N_FEATURES, H, W).astype(np.float32)
    labels = np.frombuffer(buf, dtype="<u2", count=H * W, offset=off + K * band_bytes)
    return PolSarCube(bands, labels.reshape(H, W).astype(np.uint16), C)


def write_cube(cube, path):
    with open(path, "wb") as f:
        f.write(cube_to_bytes(cube))


def read_cube(path):
    with open(path, "rb") as f:
        return cube_from_bytes(f.read())


# ---------------------------------------------------------------------------
# MFLB label raster
# ---------------------------------------------------------------------------


def labels_to_bytes(labels):
    H, W = labels.shape
    return MFLB_MAGIC + struct.pack("<2I", H, W) + np.ascontiguousarray(labels, dtype="<u2").tobytes()


def labels_from_bytes(buf):
    buf = memoryview(buf)
    _check_magic(buf, MFLB_MAGIC)
    (H, W), off = _read_u32s(buf, 4, 2, "MFLB")
    if H > MAX_DIM or W > MAX_DIM:
        raise FormatError(f"MFLB dimensions {H}x{W} out of range")
    need = H * W * 2
    if len(buf) - off != need:
        raise FormatError(f"MFLB payload is {len(buf) - off} bytes, expected {need}")
    return np.frombuffer(buf, dtype="<u2", offset=off).reshape(H, W).astype(np.uint16)


def write_labels(labels, path):
    with open(path, "wb") as f:
        f.write(labels_to_bytes(labels))


def read_labels(path):
    with open(path, "rb") as f:
        return labels_from_bytes(f.read())


# ---------------------------------------------------------------------------
# MFST checkpoint: header (magic, version, K, C, m, n_records) then records of
# u32 name length, name bytes, u32 rank, rank x u32 extents, f32 payload.
# ---------------------------------------------------------------------------


def _pack_record(name, arr):
    arr = np.asarray(arr, dtype="<f4")
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + np.ascontiguousarray(arr).tobytes()


def records_to_bytes(K, C, m, records):
    out = [MFST_MAGIC, struct.pack("<5I", VERSION, K, C, m, len(records))]
    out += [_pack_record(name, arr) for name, arr in records]
    return b"".join(out)


def records_from_bytes(buf):
    """Returns ((K, C, m), {name: float32 array}) preserving file order."""
    buf = memoryview(buf)
    _check_magic(buf, MFST_MAGIC)
    (version, K, C, m, n), off = _read_u32s(buf, 4, 5, "MFST")
    if version != VERSION:
        raise FormatError(f"unsupported MFST version {version}")
    records = {}
    for _ in range(n):
        (ln,), off = _read_u32s(buf, off, 1, "record")
        if len(buf) < off + ln:
            raise FormatError("truncated record name")
        name = bytes(buf[off:off + ln]).decode("utf-8")
        off += ln
        (rank,), off = _read_u32s(buf, off, 1, "record")
        if rank > 8:
            raise FormatError(f"record {name!r} has implausible rank {rank}")
        shape, off = _read_u32s(buf, off, rank, "record") if rank else ((), off)
        count = int(np.prod(shape)) if rank else 1
        if len(buf) < off + 4 * count:
            raise FormatError(f"truncated payload for record {name!r}")
        records[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last record")
    return (K, C, m), records
