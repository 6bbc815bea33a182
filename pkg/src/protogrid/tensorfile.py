"""Portable binary tensor container used for datasets and fixtures.

Layout (all integers little-endian):

    bytes 0..7    magic ``PGTENSR1``
    bytes 8..11   rank, unsigned 32-bit
    next 4*rank   dims, unsigned 32-bit each
    next 1        dtype code: 0 = float32, 1 = float64, 2 = uint8
    rest          payload, row-major, little-endian

Round trips are bit-exact; every structural failure raises
:class:`TensorFormatError` carrying the byte offset of the defect.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PGTENSR1"

_DTYPE_BY_CODE = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
}
_CODE_BY_KIND = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
}


class TensorFormatError(ValueError):
    """Structural defect in a tensor file, with the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def dtype_code(dtype: np.dtype) -> int:
    """Map a numpy dtype to its on-disk code; raises on unsupported dtypes."""
    try:
        return _CODE_BY_KIND[np.dtype(dtype)]
    except KeyError:
        raise ValueError(f"unsupported tensor dtype {dtype!r}; use float32, float64, or uint8") from None


def save_tensor(path: str | Path, values: np.ndarray) -> None:
    """Write a tensor to ``path``. Floating payloads must be finite."""
    values = np.asarray(values)
    if values.ndim < 1:
        raise ValueError("tensor rank must be >= 1")
    code = dtype_code(values.dtype)
    if code in (0, 1) and not np.isfinite(values).all():
        raise ValueError("tensor payload contains non-finite values")
    header = MAGIC + struct.pack("<I", values.ndim)
    header += struct.pack(f"<{values.ndim}I", *values.shape)
    header += struct.pack("<B", code)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype=_DTYPE_BY_CODE[code]).tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by :func:`save_tensor`, bit-exactly."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC):
        raise TensorFormatError("file shorter than magic", offset=len(blob))
    if blob[: len(MAGIC)] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}", offset=0)
    pos = len(MAGIC)
    if len(blob) < pos + 4:
        raise TensorFormatError("truncated rank field", offset=len(blob))
    (rank,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if rank < 1:
        raise TensorFormatError("rank must be >= 1", offset=pos - 4)
    if len(blob) < pos + 4 * rank:
        raise TensorFormatError("truncated dims", offset=len(blob))
    dims = struct.unpack_from(f"<{rank}I", blob, pos)
    pos += 4 * rank
    if len(blob) < pos + 1:
        raise TensorFormatError("missing dtype code", offset=len(blob))
    code = blob[pos]
    pos += 1
    if code not in _DTYPE_BY_CODE:
        raise TensorFormatError(f"unknown dtype code {code}", offset=pos - 1)
    dtype = _DTYPE_BY_CODE[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(blob) - pos != expected:
        raise TensorFormatError(
            f"payload length {len(blob) - pos} != expected {expected}", offset=pos
        )
    values = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)), offset=pos)
    return values.reshape(dims).copy()
