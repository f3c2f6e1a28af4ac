"""MCNT tensor files and MCNC checkpoint containers.

MCNT layout (little-endian)::

    b"MCNT" | u16 version=1 | u8 dtype (0=f32, 1=u16) | u8 rank
    | rank x u32 extents | row-major payload

MCNC layout::

    b"MCNC" | u32 count | count x (u16 name_len | utf-8 name | MCNT blob)
"""
import io
import struct

import numpy as np

MAGIC = b"MCNT"
CKPT_MAGIC = b"MCNC"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U16 = 1

_CODES = {DTYPE_F32: np.dtype("<f4"), DTYPE_U16: np.dtype("<u2")}


class FormatError(ValueError):
    pass


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype.kind == "f":
        return DTYPE_F32
    if arr.dtype.kind in "ui":
        return DTYPE_U16
    raise FormatError(f"cannot encode dtype {arr.dtype}")


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    code = _dtype_code(arr)
    if code == DTYPE_U16 and arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
        raise FormatError("integer tensor out of u16 range")
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return header + payload


def read_from(stream) -> np.ndarray:
    head = stream.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise FormatError("not an MCNT tensor (bad magic)")
    version, code, rank = struct.unpack("<HBB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported MCNT version {version}")
    if code not in _CODES:
        raise FormatError(f"unknown MCNT dtype code {code}")
    dims = stream.read(4 * rank)
    if len(dims) < 4 * rank:
        raise FormatError("truncated MCNT header")
    shape = struct.unpack(f"<{rank}I", dims)
    dt = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    payload = stream.read(nbytes)
    if len(payload) < nbytes:
        raise FormatError("truncated MCNT payload")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def decode(blob: bytes) -> np.ndarray:
    return read_from(io.BytesIO(blob))


def save(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_from(fh)


def save_checkpoint(path, tensors: dict):
    """Write named tensors in insertion order."""
    out = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(encode(arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not an MCNC checkpoint")
        try:
            (count,) = struct.unpack("<I", fh.read(4))
            tensors = {}
            for _ in range(count):
                (n,) = struct.unpack("<H", fh.read(2))
                name = fh.read(n).decode("utf-8")
                tensors[name] = read_from(fh)
        except (struct.error, UnicodeDecodeError) as exc:
            raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return tensors
