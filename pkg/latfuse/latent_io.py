"""
Reading and writing latents as NPY v1.0 files.

Only a strict subset is accepted: version 1.0, little-endian float32/float64,
C order, rank 1 to 4, every axis at least 1, payload length exactly as
declared. Each violation has its own exception class (see latfuse.errors).
Headers are parsed and written with numpy's own NPY helpers so files
interoperate with np.load/np.save.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from tokenize import TokenError
from typing import BinaryIO, Tuple, Union

import numpy as np
from numpy.lib import format as npformat

from latfuse.errors import (
    BadMagicError,
    CorruptHeaderError,
    EmptyLatentError,
    FortranOrderError,
    RankError,
    TrailingDataError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    UnsupportedVersionError,
)
from latfuse.tensor import Tensor

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

NPY_MAGIC = b"\x93NUMPY"
NPY_VERSION = (1, 0)
SUPPORTED_DESCRS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}
MAX_RANK = 4


@dataclass(frozen=True)
class LatentHeader:
    descr: str
    fortran_order: bool
    shape: Tuple[int, ...]

    @property
    def dtype(self) -> np.dtype:
        return SUPPORTED_DESCRS[self.descr]

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * self.dtype.itemsize

    @property
    def latent_shape(self) -> Tuple[int, int, int, int]:
        return (1,) * (MAX_RANK - len(self.shape)) + tuple(self.shape)


def _read_header(fp: BinaryIO, source: str) -> LatentHeader:
    magic = fp.read(len(NPY_MAGIC))
    if magic != NPY_MAGIC:
        raise BadMagicError(f"{source}: not an NPY file (magic {magic!r})")
    version = fp.read(2)
    if len(version) != 2:
        raise BadMagicError(f"{source}: file ends inside the magic string")
    if tuple(version) != NPY_VERSION:
        raise UnsupportedVersionError(f"{source}: NPY version {version[0]}.{version[1]} is not supported, only 1.0")

    # numpy retries unparsable v1.0 headers through a tokenizer, which raises TokenError
    try:
        shape, fortran_order, dtype = npformat.read_array_header_1_0(fp)
    except (ValueError, SyntaxError, TypeError, TokenError) as e:
        raise CorruptHeaderError(f"{source}: unreadable header: {e}") from e

    if dtype.str not in SUPPORTED_DESCRS:
        raise UnsupportedDtypeError(f"{source}: dtype {dtype.str!r} is not one of {sorted(SUPPORTED_DESCRS)}")
    if fortran_order:
        raise FortranOrderError(f"{source}: Fortran-ordered arrays are not supported")
    if not 1 <= len(shape) <= MAX_RANK:
        raise RankError(f"{source}: rank {len(shape)} outside 1..{MAX_RANK}")
    if any(d < 0 for d in shape):
        raise CorruptHeaderError(f"{source}: negative dimension in shape {shape}")
    if 0 in shape:
        raise EmptyLatentError(f"{source}: shape {shape} has a zero-sized axis")
    return LatentHeader(descr=dtype.str, fortran_order=False, shape=tuple(shape))


def read_header(path: PathLike) -> LatentHeader:
    with open(path, "rb") as fp:
        return _read_header(fp, str(path))


def read_array(path: PathLike) -> np.ndarray:
    """Read an NPY file as a read-only array with its stored shape."""
    source = str(path)
    with open(path, "rb") as fp:
        header = _read_header(fp, source)
        payload = fp.read(header.nbytes)
        if len(payload) < header.nbytes:
            raise TruncatedPayloadError(
                f"{source}: payload has {len(payload)} bytes, header declares {header.nbytes}"
            )
        if fp.read(1):
            raise TrailingDataError(f"{source}: data continues past the declared {header.nbytes} payload bytes")
    logger.debug("Read %s shape=%s descr=%s", source, header.shape, header.descr)
    return np.frombuffer(payload, dtype=header.dtype).reshape(header.shape)


def read_latent(path: PathLike) -> Tensor:
    """Read an NPY file as an NCHW tensor, left-padding the shape with 1s."""
    arr = read_array(path)
    return Tensor(arr.reshape((1,) * (MAX_RANK - arr.ndim) + arr.shape))


def write_array(arr: np.ndarray, path: PathLike) -> None:
    arr = np.asarray(arr)
    if not 1 <= arr.ndim <= MAX_RANK:
        raise RankError(f"Cannot write rank {arr.ndim}; supported ranks are 1..{MAX_RANK}")
    if arr.size == 0:
        raise EmptyLatentError(f"Cannot write shape {arr.shape} with a zero-sized axis")
    target = arr.dtype.newbyteorder("<")
    if target.str not in SUPPORTED_DESCRS:
        raise UnsupportedDtypeError(f"Cannot write dtype {arr.dtype}; supported: {sorted(SUPPORTED_DESCRS)}")
    arr = np.ascontiguousarray(arr, dtype=target)
    with open(path, "wb") as fp:
        npformat.write_array(fp, arr, version=NPY_VERSION, allow_pickle=False)
    logger.info("Wrote %s shape=%s descr=%s", path, arr.shape, target.str)


def write_latent(t: Tensor, path: PathLike) -> None:
    write_array(t.data, path)
