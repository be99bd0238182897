"""
Dense rank-4 NCHW tensors and the elementwise/structural operations the
fusion modules are built from.

A Tensor wraps a C-contiguous, read-only numpy array of float32 or float64.
Operations never mutate their inputs and always return fresh tensors.
"""

import logging
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from latfuse.errors import (
    DtypeMismatchError,
    InvalidSpecError,
    NonFiniteError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}
AXES = ("n", "c", "h", "w")

Shape = Tuple[int, int, int, int]
DtypeLike = Union[str, np.dtype, type]


def resolve_dtype(dtype: DtypeLike) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return DTYPES[dtype]
    try:
        resolved = np.dtype(dtype)
    except TypeError:
        raise InvalidSpecError(f"Unknown dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    if resolved not in DTYPES.values():
        raise InvalidSpecError(f"Unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    return resolved


def dtype_name(dtype: np.dtype) -> str:
    for name, candidate in DTYPES.items():
        if candidate == dtype:
            return name
    raise InvalidSpecError(f"Unsupported dtype {dtype}")


def check_shape(shape) -> Shape:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise InvalidSpecError(f"Expected an NCHW shape with 4 dims, got {shape}")
    for axis, dim in zip(AXES, shape):
        if dim < 1:
            raise InvalidSpecError(f"Axis {axis} must be >= 1, got shape {shape}")
    return shape


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable NCHW tensor. Takes ownership of `data` and marks it read-only."""

    data: np.ndarray

    def __post_init__(self):
        data = self.data
        if not isinstance(data, np.ndarray):
            raise InvalidSpecError(f"Tensor data must be a numpy array, got {type(data).__name__}")
        check_shape(data.shape)
        resolve_dtype(data.dtype)
        if not data.flags.c_contiguous:
            data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array, dtype: DtypeLike = "f32") -> "Tensor":
        """Copy `array` into a new tensor, left-padding the shape with 1s up to rank 4."""
        arr = np.array(array, dtype=resolve_dtype(dtype), copy=True, order="C")
        if arr.ndim > 4:
            raise InvalidSpecError(f"Rank {arr.ndim} is above 4")
        return cls(arr.reshape((1,) * (4 - arr.ndim) + arr.shape))

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)})"


def zeros(shape, dtype: DtypeLike = "f32") -> Tensor:
    return Tensor(np.zeros(check_shape(shape), dtype=resolve_dtype(dtype)))


def ones(shape, dtype: DtypeLike = "f32") -> Tensor:
    return Tensor(np.ones(check_shape(shape), dtype=resolve_dtype(dtype)))


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def require_finite(x: Tensor, what: str = "input") -> None:
    finite = np.isfinite(x.data)
    if not finite.all():
        raise NonFiniteError(f"{what} contains NaN or Inf", index=np.argwhere(~finite)[0])


def _check_dtypes(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DtypeMismatchError(f"dtype mismatch: {dtype_name(a.dtype)} vs {dtype_name(b.dtype)}")


def _check_axes(a: Tensor, b: Tensor, axes, what: str) -> None:
    for i, axis in enumerate(AXES):
        if axis in axes and a.shape[i] != b.shape[i]:
            raise ShapeMismatchError(
                f"{what}: axis {axis} differs ({a.shape[i]} vs {b.shape[i]}); shapes {a.shape} and {b.shape}",
                axis=axis,
            )


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack `a`'s channels followed by `b`'s."""
    _check_dtypes(a, b)
    _check_axes(a, b, ("n", "h", "w"), "concat_channels")
    return Tensor(np.concatenate((a.data, b.data), axis=1))


def split_channels(x: Tensor, at: int) -> Tuple[Tensor, Tensor]:
    if not 0 < at < x.c:
        raise InvalidSpecError(f"Split point {at} outside 1..{x.c - 1}")
    return Tensor(x.data[:, :at].copy()), Tensor(x.data[:, at:].copy())


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across channels, stabilised by subtracting the channel max."""
    require_finite(x, "softmax input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return Tensor(e / _sum_channels(e))


def sigmoid(x: Tensor) -> Tensor:
    require_finite(x, "sigmoid input")
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1 / (1 + z), z / (1 + z))
    return Tensor(out.astype(x.dtype, copy=False))


def _sum_channels(arr: np.ndarray) -> np.ndarray:
    # explicit channel order keeps the reduction independent of numpy's pairwise summation
    acc = arr[:, 0:1].copy()
    for ci in range(1, arr.shape[1]):
        acc += arr[:, ci : ci + 1]
    return acc


def avg_pool_channels(x: Tensor) -> Tensor:
    acc = _sum_channels(x.data)
    acc /= x.dtype.type(x.c)
    return Tensor(acc)


def max_pool_channels(x: Tensor) -> Tensor:
    return Tensor(x.data.max(axis=1, keepdims=True))


def argmax_channels(x: Tensor) -> np.ndarray:
    """Index of the lowest maximal channel at each pixel, shape (n, 1, h, w)."""
    return x.data.argmax(axis=1)[:, None]


_ELEMENTWISE = {"add": np.add, "sub": np.subtract, "mul": np.multiply}


def _check_broadcast(a: Tensor, b: Tensor, what: str) -> None:
    _check_dtypes(a, b)
    _check_axes(a, b, ("n", "h", "w"), what)
    if a.c != b.c and 1 not in (a.c, b.c):
        raise ShapeMismatchError(
            f"{what}: channel counts {a.c} and {b.c} neither match nor broadcast", axis="c"
        )


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """add/sub/mul of equal shapes, or with a 1-channel map broadcast across channels."""
    try:
        ufunc = _ELEMENTWISE[op]
    except KeyError:
        raise InvalidSpecError(f"Unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}")
    _check_broadcast(a, b, f"elementwise {op}")
    return Tensor(ufunc(a.data, b.data))


def broadcast_mul(map_: Tensor, x: Tensor) -> Tensor:
    """Multiply `x` by a 1-channel (or per-channel) map repeated across its channels."""
    _check_broadcast(map_, x, "broadcast_mul")
    if map_.c not in (1, x.c):
        raise ShapeMismatchError(f"broadcast_mul: map has {map_.c} channels, x has {x.c}", axis="c")
    return Tensor(map_.data * x.data)


def one_minus(x: Tensor) -> Tensor:
    return Tensor(x.dtype.type(1) - x.data)
