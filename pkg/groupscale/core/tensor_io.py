"""Dense tensor container and the QTNSR1 binary format.

Layout (little-endian regardless of host)::

    magic  b"QTNSR1"        6 bytes
    dtype  u8               0=f32, 1=f64, 2=i32
    ndim   u8
    dims   ndim x u64
    payload                 row-major values
"""

import logging
import math
import os
import struct
from typing import Iterable, Tuple, Union

import numpy as np

from .errors import ShapeMismatchError, TensorFormatError

logger = logging.getLogger(__name__)

MAGIC = b"QTNSR1"
DTYPE_TAGS = {"f32": 0, "f64": 1, "i32": 2}
TAG_DTYPES = {tag: name for name, tag in DTYPE_TAGS.items()}
NUMPY_DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i32": np.dtype("<i4"),
}

_PREAMBLE = struct.Struct("<6sBB")
_DIM = struct.Struct("<Q")

PathLike = Union[str, os.PathLike]


class Tensor:
    """Immutable dense row-major array with an explicit element type tag."""

    __slots__ = ("dtype", "shape", "_array")

    def __init__(self, dtype: str, shape: Iterable[int], data):
        if dtype not in DTYPE_TAGS:
            raise ValueError(f"Unknown dtype {dtype!r}, expected one of {sorted(DTYPE_TAGS)}")
        shape = tuple(int(n) for n in shape)
        if not shape:
            raise ValueError("Tensor shape must have at least one dimension")
        if any(n < 1 for n in shape):
            raise ValueError(f"All shape entries must be >= 1, got {shape}")

        flat = np.asarray(data).reshape(-1)
        count = math.prod(shape)
        if flat.size != count:
            raise ShapeMismatchError(
                f"Shape {shape} holds {count} values but data has {flat.size}"
            )
        if dtype == "i32" and flat.size and not np.issubdtype(flat.dtype, np.integer):
            if not np.array_equal(flat, np.rint(flat)):
                raise ValueError("i32 tensor data must be integral")

        array = np.array(flat, dtype=NUMPY_DTYPES[dtype], copy=True).reshape(shape)
        array.flags.writeable = False
        self.dtype = dtype
        self.shape = shape
        self._array = array

    @classmethod
    def from_array(cls, array, dtype: str = None) -> "Tensor":
        """Build a tensor from a numpy array, inferring the dtype tag when omitted."""
        array = np.asarray(array)
        if dtype is None:
            if array.dtype == np.float32:
                dtype = "f32"
            elif np.issubdtype(array.dtype, np.integer):
                dtype = "i32"
            else:
                dtype = "f64"
        if array.ndim == 0:
            array = array.reshape(1)
        return cls(dtype, array.shape, array)

    @property
    def array(self) -> np.ndarray:
        """Read-only view of the stored values."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Flat read-only view, row-major."""
        return self._array.reshape(-1)

    def to_array(self, dtype=np.float64) -> np.ndarray:
        """Writable copy, widened to float64 unless told otherwise."""
        return np.array(self._array, dtype=dtype, copy=True)

    def __len__(self) -> int:
        return self._array.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and self._array.tobytes() == other._array.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor(dtype={self.dtype!r}, shape={self.shape})"


def encode_tensor(t: Tensor) -> bytes:
    """Serialize a tensor to its exact on-disk bytes."""
    if len(t.shape) > 255:
        raise ValueError("Tensor has more than 255 dimensions")
    parts = [_PREAMBLE.pack(MAGIC, DTYPE_TAGS[t.dtype], len(t.shape))]
    parts.extend(_DIM.pack(n) for n in t.shape)
    parts.append(np.ascontiguousarray(t.array, dtype=NUMPY_DTYPES[t.dtype]).tobytes(order="C"))
    return b"".join(parts)


def decode_tensor(buf: bytes) -> Tensor:
    """Parse QTNSR1 bytes. Raises TensorFormatError naming the bad field."""
    if len(buf) < _PREAMBLE.size:
        raise TensorFormatError("header", f"truncated: {len(buf)} bytes")
    magic, tag, ndim = _PREAMBLE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if tag not in TAG_DTYPES:
        raise TensorFormatError("dtype", f"tag {tag} out of range 0..{len(TAG_DTYPES) - 1}")
    if ndim == 0:
        raise TensorFormatError("ndim", "tensor must have at least one dimension")

    offset = _PREAMBLE.size
    dims_end = offset + ndim * _DIM.size
    if len(buf) < dims_end:
        raise TensorFormatError("dims", f"truncated: need {ndim} dims")
    shape: Tuple[int, ...] = tuple(
        _DIM.unpack_from(buf, offset + k * _DIM.size)[0] for k in range(ndim)
    )
    if any(n < 1 for n in shape):
        raise TensorFormatError("dims", f"zero-sized dimension in {shape}")

    dtype = TAG_DTYPES[tag]
    np_dtype = NUMPY_DTYPES[dtype]
    expected = math.prod(shape) * np_dtype.itemsize
    payload = buf[dims_end:]
    if len(payload) < expected:
        raise TensorFormatError("payload", f"truncated: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise TensorFormatError("payload", f"{len(payload) - expected} trailing bytes")

    values = np.frombuffer(payload, dtype=np_dtype)
    return Tensor(dtype, shape, values)


def save_tensor(t: Tensor, path: PathLike) -> None:
    """Write a tensor file. I/O errors propagate."""
    with open(path, "wb") as f:
        f.write(encode_tensor(t))
    logger.debug("Saved %s to %s", t, path)


def load_tensor(path: PathLike) -> Tensor:
    """Read a tensor file written by save_tensor."""
    with open(path, "rb") as f:
        buf = f.read()
    t = decode_tensor(buf)
    logger.debug("Loaded %s from %s", t, path)
    return t


def save_array(array: np.ndarray, path: PathLike, dtype: str = "f64") -> None:
    """Convenience wrapper: wrap a numpy array and save it."""
    save_tensor(Tensor(dtype, np.shape(array) or (1,), array), path)


def load_array(path: PathLike) -> np.ndarray:
    """Load a tensor file as a float64 array (f32 and i32 are widened)."""
    return load_tensor(path).to_array()
