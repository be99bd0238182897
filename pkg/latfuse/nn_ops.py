"""
Zero-padded "same" 2-D cross-correlation.

Two forward paths share one per-element accumulation order: input channel,
then kernel row, then kernel column, with the bias added last. `conv2d_naive`
is the direct definition and serves as the oracle; `conv2d_fast` pads once,
reuses scratch buffers and fans row blocks out to workers. Because the order
is shared, the two agree bit for bit.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from latfuse.errors import ChannelMismatchError, InvalidSpecError, ShapeMismatchError
from latfuse.parallel import get_num_threads, map_ordered
from latfuse.tensor import DtypeLike, Tensor, resolve_dtype

logger = logging.getLogger(__name__)

IMPLS = ("naive", "fast")
MIN_ROW_BLOCK = 8


@dataclass(frozen=True, eq=False)
class Conv2dParams:
    weights: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)

    def __post_init__(self):
        weights = np.ascontiguousarray(self.weights)
        bias = np.ascontiguousarray(self.bias)
        if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
            raise InvalidSpecError(f"Conv weights must be (out, in, k, k), got {weights.shape}")
        if weights.shape[2] % 2 == 0:
            raise InvalidSpecError(f"Kernel size must be odd, got {weights.shape[2]}")
        if min(weights.shape) < 1:
            raise InvalidSpecError(f"Conv weights have an empty axis: {weights.shape}")
        if bias.shape != (weights.shape[0],):
            raise InvalidSpecError(
                f"Bias shape {bias.shape} does not match {weights.shape[0]} output channels"
            )
        resolve_dtype(weights.dtype)
        if bias.dtype != weights.dtype:
            bias = bias.astype(weights.dtype)
        if not (np.isfinite(weights).all() and np.isfinite(bias).all()):
            raise InvalidSpecError("Conv weights and bias must be finite")
        weights.flags.writeable = False
        bias.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def zeros(cls, in_channels: int, out_channels: int, kernel_size: int, dtype: DtypeLike = "f32"):
        dtype = resolve_dtype(dtype)
        return cls(
            np.zeros((out_channels, in_channels, kernel_size, kernel_size), dtype=dtype),
            np.zeros(out_channels, dtype=dtype),
        )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) // 2

    @property
    def dtype(self) -> np.dtype:
        return self.weights.dtype

    def astype(self, dtype: DtypeLike) -> "Conv2dParams":
        target = resolve_dtype(dtype)
        if target == self.dtype:
            return self
        return Conv2dParams(self.weights.astype(target), self.bias.astype(target))

    def with_bias(self, bias) -> "Conv2dParams":
        return Conv2dParams(self.weights.copy(), np.asarray(bias, dtype=self.dtype))


@dataclass(frozen=True)
class ConvGrads:
    grad_x: Tensor
    grad_weights: np.ndarray
    grad_bias: np.ndarray


def _check_input(x: Tensor, p: Conv2dParams) -> Tuple[np.ndarray, np.ndarray]:
    if x.c != p.in_channels:
        raise ChannelMismatchError(
            f"Conv expects {p.in_channels} input channels, got {x.c} (shape {x.shape})"
        )
    return p.weights.astype(x.dtype, copy=False), p.bias.astype(x.dtype, copy=False)


def conv_macs(shape, p: Conv2dParams) -> int:
    """Multiply-accumulates of one forward pass, bias additions excluded."""
    n, c, h, w = shape
    return n * h * w * p.out_channels * c * p.kernel_size * p.kernel_size


def conv2d_naive(x: Tensor, p: Conv2dParams) -> Tensor:
    weights, bias = _check_input(x, p)
    n, c, h, w = x.shape
    k, pad = p.kernel_size, p.padding
    src = x.data
    out = np.zeros((n, p.out_channels, h, w), dtype=x.dtype)

    for b in range(n):
        for co in range(p.out_channels):
            acc = out[b, co]
            for ci in range(c):
                for ky in range(k):
                    dy = ky - pad
                    y0, y1 = max(0, -dy), min(h, h - dy)
                    if y0 >= y1:
                        continue
                    for kx in range(k):
                        dx = kx - pad
                        x0, x1 = max(0, -dx), min(w, w - dx)
                        if x0 >= x1:
                            continue
                        # taps that land in the zero border contribute nothing
                        acc[y0:y1, x0:x1] += weights[co, ci, ky, kx] * src[b, ci, y0 + dy : y1 + dy, x0 + dx : x1 + dx]
            acc += bias[co]
    return Tensor(out)


def _row_blocks(h: int) -> list:
    threads = get_num_threads()
    size = max(MIN_ROW_BLOCK, math.ceil(h / threads))
    return [(y0, min(y0 + size, h)) for y0 in range(0, h, size)]


def conv2d_fast(x: Tensor, p: Conv2dParams) -> Tensor:
    weights, bias = _check_input(x, p)
    n, c, h, w = x.shape
    k, pad = p.kernel_size, p.padding
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((n, p.out_channels, h, w), dtype=x.dtype)

    def run(task):
        b, co, y0, y1 = task
        rows = y1 - y0
        acc = np.zeros((rows, w), dtype=x.dtype)
        scratch = np.empty((rows, w), dtype=x.dtype)
        taps = weights[co]
        for ci in range(c):
            plane = xpad[b, ci]
            for ky in range(k):
                band = plane[y0 + ky : y1 + ky]
                for kx in range(k):
                    np.multiply(taps[ci, ky, kx], band[:, kx : kx + w], out=scratch)
                    acc += scratch
        acc += bias[co]
        out[b, co, y0:y1] = acc

    tasks = [(b, co, y0, y1) for b in range(n) for co in range(p.out_channels) for y0, y1 in _row_blocks(h)]
    logger.debug("conv2d_fast %s k=%d: %d tasks", x.shape, k, len(tasks))
    map_ordered(run, tasks)
    return Tensor(out)


def conv2d(x: Tensor, p: Conv2dParams, impl: str = "fast") -> Tensor:
    if impl == "fast":
        return conv2d_fast(x, p)
    if impl == "naive":
        return conv2d_naive(x, p)
    raise InvalidSpecError(f"Unknown conv implementation {impl!r}; expected one of {IMPLS}")


def conv2d_backward(x: Tensor, p: Conv2dParams, grad_out: Tensor) -> ConvGrads:
    weights, _ = _check_input(x, p)
    n, c, h, w = x.shape
    expected = (n, p.out_channels, h, w)
    if grad_out.shape != expected:
        raise ShapeMismatchError(f"grad_out has shape {grad_out.shape}, expected {expected}")
    k, pad = p.kernel_size, p.padding
    g = grad_out.data.astype(x.dtype, copy=False)
    xpad = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

    grad_weights = np.zeros(weights.shape, dtype=x.dtype)
    grad_xpad = np.zeros(xpad.shape, dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            window = xpad[:, :, ky : ky + h, kx : kx + w]
            grad_weights[:, :, ky, kx] = np.einsum("nohw,nchw->oc", g, window)
            grad_xpad[:, :, ky : ky + h, kx : kx + w] += np.einsum("nohw,oc->nchw", g, weights[:, :, ky, kx])

    grad_bias = g.sum(axis=(0, 2, 3))
    grad_x = grad_xpad[:, :, pad : pad + h, pad : pad + w].copy()
    return ConvGrads(Tensor(grad_x), grad_weights, grad_bias)


def conv2d_params(weights, bias: Optional[np.ndarray] = None, dtype: DtypeLike = "f32") -> Conv2dParams:
    """Build params from array-likes; bias defaults to zeros."""
    target = resolve_dtype(dtype)
    weights = np.array(weights, dtype=target)
    if bias is None:
        bias = np.zeros(weights.shape[0] if weights.ndim else 0, dtype=target)
    return Conv2dParams(weights, np.array(bias, dtype=target))
