"""Bit-exact binary tensor serialization.

File layout (documented in docs/formats.md):

    magic    4 bytes  b"MHT1"
    dtype    1 byte   0=f32, 1=f64, 2=u8
    ndim     1 byte   1..5
    shape    ndim * 8 bytes, little-endian u64 per extent
    data     product(shape) * itemsize bytes, little-endian, C order

No padding, no footer. Readers classify defects (bad magic, unknown dtype,
truncation) with the byte offset at which they were detected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagic, InvalidHeader, IOFailure, TruncatedData, UnknownDtype

MAGIC = b"MHT1"

DTYPE_CODES = {"f32": 0, "f64": 1, "u8": 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
NUMPY_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
}
_TAG_BY_KIND = {np.dtype("f4"): "f32", np.dtype("f8"): "f64", np.dtype("u1"): "u8"}

MAX_NDIM = 5


@dataclass(frozen=True)
class Tensor:
    """Dense n-dimensional array with a fixed element type.

    `values` is a C-contiguous numpy array; `dtype` is the format tag
    ("f32" | "f64" | "u8"). Shape extents are >= 1 and ndim is 1..5.
    """

    dtype: str
    values: np.ndarray

    def __init__(self, dtype: str, shape, data):
        if dtype not in DTYPE_CODES:
            raise InvalidHeader(f"unsupported dtype tag '{dtype}'", 4)
        shape = tuple(int(e) for e in shape)
        if not 1 <= len(shape) <= MAX_NDIM:
            raise InvalidHeader(f"ndim {len(shape)} outside [1, {MAX_NDIM}]", 5)
        if any(e < 1 for e in shape):
            raise InvalidHeader(f"non-positive extent in shape {shape}", 6)
        arr = np.asarray(data, dtype=NUMPY_DTYPES[dtype])
        if arr.size != int(np.prod(shape)):
            raise InvalidHeader(
                f"shape {shape} wants {int(np.prod(shape))} elements, got {arr.size}", 6
            )
        arr = np.ascontiguousarray(arr.reshape(shape))
        object.__setattr__(self, "dtype", dtype)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Tensor":
        """Wrap a numpy array, inferring the dtype tag from its dtype."""
        base = np.dtype(arr.dtype.str.lstrip("<>=|"))
        tag = _TAG_BY_KIND.get(base)
        if tag is None:
            raise InvalidHeader(f"no format tag for numpy dtype {arr.dtype}", 4)
        return cls(tag, arr.shape, arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.dtype, self.shape, self.values.tobytes()))


def tensor_to_bytes(t: Tensor) -> bytes:
    header = MAGIC + bytes([DTYPE_CODES[t.dtype], len(t.shape)])
    header += b"".join(struct.pack("<Q", e) for e in t.shape)
    payload = np.ascontiguousarray(t.values, dtype=NUMPY_DTYPES[t.dtype])
    return header + payload.tobytes(order="C")


def tensor_from_bytes(buf: bytes, *, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one tensor starting at `offset`; returns (tensor, end offset).

    Truncation errors report the offset at which the buffer ran out.
    """
    end = len(buf)
    if end - offset < 4:
        raise TruncatedData("file ends inside magic", end)
    if buf[offset : offset + 4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {buf[offset:offset + 4]!r}", offset)
    pos = offset + 4
    if end - pos < 1:
        raise TruncatedData("file ends before dtype code", end)
    code = buf[pos]
    if code not in CODE_DTYPES:
        raise UnknownDtype(f"unknown dtype code {code}", pos)
    dtype = CODE_DTYPES[code]
    pos += 1
    if end - pos < 1:
        raise TruncatedData("file ends before ndim", end)
    ndim = buf[pos]
    if not 1 <= ndim <= MAX_NDIM:
        raise InvalidHeader(f"ndim {ndim} outside [1, {MAX_NDIM}]", pos)
    pos += 1
    if end - pos < 8 * ndim:
        raise TruncatedData("file ends inside shape", end)
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    for axis, extent in enumerate(shape):
        if extent < 1:
            raise InvalidHeader(f"zero extent on axis {axis}", pos - 8 * (ndim - axis))
    count = 1
    for extent in shape:
        count *= extent
    nbytes = count * NUMPY_DTYPES[dtype].itemsize
    if end - pos < nbytes:
        raise TruncatedData(
            f"element data needs {nbytes} bytes at offset {pos}, file ends early", end
        )
    arr = np.frombuffer(buf, dtype=NUMPY_DTYPES[dtype], count=count, offset=pos)
    pos += nbytes
    return Tensor(dtype, shape, arr.copy()), pos


def write_tensor(t: Tensor, path) -> None:
    """Write `t` to `path` in the exchange format."""
    try:
        Path(path).write_bytes(tensor_to_bytes(t))
    except OSError as exc:
        raise IOFailure(path, exc) from exc


def read_tensor(path) -> Tensor:
    """Read a tensor written by write_tensor; inverse of it, bit-exact."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(path, exc) from exc
    tensor, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise InvalidHeader(f"{len(buf) - end} trailing bytes after element data", end)
    return tensor
