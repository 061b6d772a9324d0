"""Image files: 16-bit grayscale PNG and a small raw tensor container.

Raw tensor layout (little-endian)::

    bytes 0-3   magic b"MCRT"
    byte  4     format version (1)
    byte  5     element type: 1=uint16 2=int16 3=float32 4=float64
    byte  6     ndim
    byte  7     reserved (0)
    4*ndim      dims as uint32, outermost first
    ...         row-major payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

RAW_MAGIC = b"MCRT"
RAW_VERSION = 1
RAW_SUFFIX = ".mcrt"
_DTYPES = {1: np.dtype("<u2"), 2: np.dtype("<i2"), 3: np.dtype("<f4"), 4: np.dtype("<f8")}
_CODES = {v.newbyteorder("="): k for k, v in _DTYPES.items()}


class ImageFileError(ValueError):
    pass


def write_raw(path: "str | Path", array: np.ndarray) -> None:
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ImageFileError(f"unsupported element type {arr.dtype}")
    header = RAW_MAGIC + struct.pack("<BBBB", RAW_VERSION, code, arr.ndim, 0)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def read_raw(path: "str | Path") -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != RAW_MAGIC:
        raise ImageFileError(f"{path}: not a raw tensor file")
    version, code, ndim, _ = struct.unpack("<BBBB", data[4:8])
    if version != RAW_VERSION or code not in _DTYPES:
        raise ImageFileError(f"{path}: unsupported version {version} / type {code}")
    dims = struct.unpack(f"<{ndim}I", data[8 : 8 + 4 * ndim])
    dtype = _DTYPES[code]
    payload = data[8 + 4 * ndim :]
    if len(payload) != int(np.prod(dims)) * dtype.itemsize:
        raise ImageFileError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def write_png16(path: "str | Path", pixels: np.ndarray) -> None:
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ImageFileError(f"PNG images must be 2-D, got shape {arr.shape}")
    rounded = np.rint(arr)
    if not np.all(rounded == arr) or arr.min() < 0 or arr.max() > 65535:
        raise ImageFileError("16-bit PNG needs integer values in [0, 65535]; use the raw format")
    Image.fromarray(rounded.astype(np.uint16)).save(path, format="PNG")


def read_png16(path: "str | Path") -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im).astype(np.float64)


def read_image(path: "str | Path") -> np.ndarray:
    """Pixels as a float64 array, from either supported format."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_png16(path)
    return read_raw(path).astype(np.float64)


def write_image(path: "str | Path", pixels: np.ndarray) -> Path:
    """PNG when the suffix says so, raw float32 otherwise."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png16(path, pixels)
    else:
        write_raw(path, np.asarray(pixels, dtype=np.float32))
    return path
