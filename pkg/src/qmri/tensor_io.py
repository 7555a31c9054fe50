"""Binary tensor container used for every on-disk array artifact.

Layout (all little-endian):
    magic   8 bytes  b"QMRITNSR"
    version u16      currently 1
    dtype   u8       0 = float64, 1 = complex128
    ndim    u8
    dims    u64 per axis
    payload row-major values; complex stored as interleaved (re, im) float64

Round trips are bit-exact for every supported dtype and shape, including
non-finite values.
"""

import struct

import numpy as np

MAGIC = b"QMRITNSR"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}
_CODE_FOR_KIND = {"f": 0, "c": 1}


class TensorFormatError(Exception):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


def write_tensor(path, data) -> None:
    """Write `data` to `path` in the container format above.

    Integer and float32 inputs are widened to float64; complex inputs are
    widened to complex128.  Any zero-length axis is rejected.
    """
    arr = np.asarray(data)
    if arr.dtype.kind == "c":
        arr = arr.astype("<c16")
    elif arr.dtype.kind in "fiub":
        arr = arr.astype("<f8")
    else:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if any(d == 0 for d in arr.shape):
        raise ValueError("all dims must be >= 1")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")

    header = bytearray()
    header += MAGIC
    header += struct.pack("<H", VERSION)
    header += struct.pack("<B", _CODE_FOR_KIND[arr.dtype.kind])
    header += struct.pack("<B", arr.ndim)
    for d in arr.shape:
        header += struct.pack("<Q", d)
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path):
    """Read a tensor written by write_tensor; bit-exact inverse."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC):
        raise TruncatedError("file shorter than magic")
    if raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 4:
        raise TruncatedError("header truncated")
    (version,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} not supported")
    code, ndim = struct.unpack_from("<BB", raw, pos)
    pos += 2
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if len(raw) < pos + 8 * ndim:
        raise TruncatedError("dims truncated")
    dims = struct.unpack_from("<" + "Q" * ndim, raw, pos)
    pos += 8 * ndim
    if any(d == 0 for d in dims):
        raise TensorFormatError("zero-length axis")
    dtype = _DTYPE_CODES[code]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if len(raw) - pos < nbytes:
        raise TruncatedError(
            f"payload has {len(raw) - pos} bytes, expected {nbytes}"
        )
    if len(raw) - pos > nbytes:
        raise TensorFormatError("trailing bytes after payload")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=pos)
    return arr.reshape(dims).copy()


def write_pgm(path, image) -> None:
    """Export a real 2D map as a 16-bit binary PGM (big-endian sample words).

    The image is windowed linearly from [min, max] to [0, 65535]; a constant
    image maps to all zeros.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export expects a 2D image")
    lo, hi = float(img.min()), float(img.max())
    if hi > lo:
        scaled = (img - lo) / (hi - lo) * 65535.0
    else:
        scaled = np.zeros_like(img)
    words = np.round(scaled).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(words.tobytes(order="C"))
