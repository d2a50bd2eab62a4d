"""FRT1 binary tensor files and named-tensor archives.

Layout: ``b"FRT1"``, u8 dtype code (0=f32, 1=f64), u8 rank, rank x u32
extents, then little-endian values in row-major order.

An archive is a zip file of ``<name>.frt`` entries plus ``manifest.txt``
with one ``name shape dtype`` line per entry. Entry timestamps are pinned
so identical contents give identical bytes.
"""

from __future__ import annotations

import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MAGIC = b"FRT1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_EPOCH = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    pass


def encode(array):
    arr = np.asarray(array)
    if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
        arr = arr.astype(np.float64)
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    code = _CODES[np.dtype(arr.dtype.str)]
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes(order="C")


def decode(buf):
    buf = bytes(buf)
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, not an FRT1 stream")
    if len(buf) < 6:
        raise FormatError("truncated header")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    offset = 6 + 4 * rank
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) - offset != count * dtype.itemsize:
        raise FormatError(f"payload has {len(buf) - offset} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape).astype(
        dtype.newbyteorder("="))


def write_tensor(path, array):
    Path(path).write_bytes(encode(array))


def read_tensor(path):
    return decode(Path(path).read_bytes())


def _dtype_name(arr):
    return "f32" if arr.dtype.itemsize == 4 else "f64"


def save_archive(path, tensors):
    """Write a dict of named arrays (insertion order kept) as an FRT1 archive."""
    manifest = []
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in tensors.items():
            data = encode(arr)
            arr = decode(data)
            manifest.append(f"{name} {'x'.join(map(str, arr.shape)) or 'scalar'} {_dtype_name(arr)}")
            info = zipfile.ZipInfo(f"{name}.frt", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
        info = zipfile.ZipInfo("manifest.txt", date_time=_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, "\n".join(manifest) + "\n")
    Path(path).write_bytes(buf.getvalue())


def load_archive(path):
    out = {}
    with zipfile.ZipFile(path) as zf:
        lines = zf.read("manifest.txt").decode().splitlines()
        for line in lines:
            if not line.strip():
                continue
            name, shape, dtype = line.rsplit(" ", 2)
            arr = decode(zf.read(f"{name}.frt"))
            expected = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            if arr.shape != expected or _dtype_name(arr) != dtype:
                raise FormatError(f"{name}: manifest says {shape} {dtype}, entry is "
                                  f"{arr.shape} {_dtype_name(arr)}")
            out[name] = arr
    return out
