"""
Dual-latent fusion: Adaptive Global Fusion (AGF) and Dynamic Spatial Fusion (DSF).

AGF concatenates the base and refined latents along channels, turns them into
two attention logits with a convolution, softmaxes the logits across those two
channels and blends the latents pixel by pixel with the resulting weights.

DSF average-pools the refined latent and max-pools the base latent across
channels, concatenates the two maps (average first), runs a 7x7 convolution
and a sigmoid to get a spatial gate M, then blends M * refined + (1 - M) * base.

Both gates are broadcast across the latent's channels. Modules are immutable;
forward and backward are pure functions of their arguments.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from latfuse import rng
from latfuse.errors import (
    ChannelMismatchError,
    DtypeMismatchError,
    InvalidSpecError,
    ManifestError,
    ShapeMismatchError,
)
from latfuse.latent_io import read_array, write_array
from latfuse.nn_ops import Conv2dParams, conv2d, conv2d_backward
from latfuse.tensor import (
    DtypeLike,
    Tensor,
    argmax_channels,
    avg_pool_channels,
    broadcast_mul,
    concat_channels,
    elementwise,
    max_pool_channels,
    one_minus,
    resolve_dtype,
    sigmoid,
    softmax_channels,
    split_channels,
)

logger = logging.getLogger(__name__)

METHODS = ("agf", "dsf")
AGF_KERNEL_SIZES = (1, 7)
DEFAULT_K_AGF = 1
DSF_KERNEL_SIZE = 7


@dataclass(frozen=True)
class FusionSpec:
    method: str
    channels: int
    k_agf: int = DEFAULT_K_AGF

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidSpecError(f"Unknown fusion method {self.method!r}; expected one of {METHODS}")
        if self.channels < 1:
            raise InvalidSpecError(f"Channel count must be >= 1, got {self.channels}")
        if self.method == "agf" and self.k_agf not in AGF_KERNEL_SIZES:
            raise InvalidSpecError(f"AGF kernel size must be one of {AGF_KERNEL_SIZES}, got {self.k_agf}")

    @property
    def kernel_size(self) -> int:
        return self.k_agf if self.method == "agf" else DSF_KERNEL_SIZE

    @property
    def conv_shape(self):
        k = self.kernel_size
        if self.method == "agf":
            return (2, 2 * self.channels, k, k)
        return (1, 2, k, k)


@dataclass(frozen=True)
class InitScheme:
    kind: str = "zeros"
    scale: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zeros", "uniform"):
            raise InvalidSpecError(f"Unknown init scheme {self.kind!r}")
        if not (np.isfinite(self.scale) and self.scale >= 0):
            raise InvalidSpecError(f"Init scale must be finite and >= 0, got {self.scale}")
        if self.seed < 0:
            raise InvalidSpecError(f"Init seed must be >= 0, got {self.seed}")

    @classmethod
    def parse(cls, text: str) -> "InitScheme":
        """Parse `zeros` or `uniform:<scale>:<seed>`."""
        parts = text.split(":")
        if parts == ["zeros"]:
            return cls("zeros")
        if len(parts) == 3 and parts[0] == "uniform":
            try:
                return cls("uniform", scale=float(parts[1]), seed=int(parts[2]))
            except ValueError:
                pass
        raise InvalidSpecError(f"Bad init scheme {text!r}; expected 'zeros' or 'uniform:<scale>:<seed>'")


@dataclass(frozen=True)
class AgfModule:
    attn_conv: Conv2dParams
    channels: int

    method = "agf"

    def __post_init__(self):
        conv = self.attn_conv
        if conv.in_channels != 2 * self.channels or conv.out_channels != 2:
            raise ShapeMismatchError(
                f"AGF conv must map {2 * self.channels} -> 2 channels, got "
                f"{conv.in_channels} -> {conv.out_channels}",
                axis="c",
            )
        if conv.kernel_size not in AGF_KERNEL_SIZES:
            raise InvalidSpecError(f"AGF kernel size must be one of {AGF_KERNEL_SIZES}, got {conv.kernel_size}")

    @property
    def conv(self) -> Conv2dParams:
        return self.attn_conv

    def with_conv(self, conv: Conv2dParams) -> "AgfModule":
        return AgfModule(conv, self.channels)


@dataclass(frozen=True)
class DsfModule:
    spatial_conv: Conv2dParams
    channels: Optional[int] = None  # None accepts latents with any channel count

    method = "dsf"

    def __post_init__(self):
        conv = self.spatial_conv
        if conv.in_channels != 2 or conv.out_channels != 1:
            raise ShapeMismatchError(
                f"DSF conv must map 2 -> 1 channels, got {conv.in_channels} -> {conv.out_channels}",
                axis="c",
            )
        if conv.kernel_size != DSF_KERNEL_SIZE:
            raise InvalidSpecError(f"DSF kernel size must be {DSF_KERNEL_SIZE}, got {conv.kernel_size}")

    @property
    def conv(self) -> Conv2dParams:
        return self.spatial_conv

    def with_conv(self, conv: Conv2dParams) -> "DsfModule":
        return DsfModule(conv, self.channels)


FusionModule = Union[AgfModule, DsfModule]


@dataclass(frozen=True)
class FusionOutput:
    fused: Tensor
    maps: Tensor  # AGF: (n, 2, h, w) holding W_b, W_r. DSF: (n, 1, h, w) gate.


@dataclass(frozen=True)
class FusionGrads:
    grad_base: Tensor
    grad_refined: Tensor
    grad_weights: np.ndarray
    grad_bias: np.ndarray


def _check_pair(base: Tensor, refined: Tensor, channels: Optional[int]) -> None:
    if base.shape != refined.shape:
        axis = next(a for a, x, y in zip("nchw", base.shape, refined.shape) if x != y)
        raise ShapeMismatchError(
            f"base {base.shape} and refined {refined.shape} differ on axis {axis}", axis=axis
        )
    if base.dtype != refined.dtype:
        raise DtypeMismatchError(f"base is {base.dtype}, refined is {refined.dtype}")
    if channels is not None and base.c != channels:
        raise ChannelMismatchError(f"module is configured for {channels} channels, latents have {base.c}")


def _check_grad(base: Tensor, grad_fused: Tensor) -> np.ndarray:
    if grad_fused.shape != base.shape:
        raise ShapeMismatchError(f"grad_fused {grad_fused.shape} does not match latents {base.shape}")
    return grad_fused.data.astype(base.dtype, copy=False)


def agf_forward(m: AgfModule, base: Tensor, refined: Tensor, impl: str = "fast") -> FusionOutput:
    _check_pair(base, refined, m.channels)
    concat = concat_channels(base, refined)
    logits = conv2d(concat, m.attn_conv, impl)
    weights = softmax_channels(logits)
    w_b, w_r = split_channels(weights, 1)
    fused = elementwise("add", broadcast_mul(w_b, base), broadcast_mul(w_r, refined))
    return FusionOutput(fused=fused, maps=weights)


def dsf_forward(m: DsfModule, base: Tensor, refined: Tensor, impl: str = "fast") -> FusionOutput:
    _check_pair(base, refined, m.channels)
    pooled = concat_channels(avg_pool_channels(refined), max_pool_channels(base))
    gate = sigmoid(conv2d(pooled, m.spatial_conv, impl))
    fused = elementwise("add", broadcast_mul(gate, refined), broadcast_mul(one_minus(gate), base))
    return FusionOutput(fused=fused, maps=gate)


def fuse(m: FusionModule, base: Tensor, refined: Tensor, impl: str = "fast") -> FusionOutput:
    if isinstance(m, AgfModule):
        return agf_forward(m, base, refined, impl)
    return dsf_forward(m, base, refined, impl)


def agf_backward(m: AgfModule, base: Tensor, refined: Tensor, grad_fused: Tensor) -> FusionGrads:
    _check_pair(base, refined, m.channels)
    g = _check_grad(base, grad_fused)
    concat = concat_channels(base, refined)
    conv = m.attn_conv.astype(base.dtype)
    weights = softmax_channels(conv2d(concat, conv)).data

    # blend: fused = W_b * base + W_r * refined
    d_weights = np.concatenate(
        ((g * base.data).sum(axis=1, keepdims=True), (g * refined.data).sum(axis=1, keepdims=True)),
        axis=1,
    )
    # softmax Jacobian-vector product
    d_logits = weights * (d_weights - (weights * d_weights).sum(axis=1, keepdims=True))

    conv_grads = conv2d_backward(concat, conv, Tensor(d_logits))
    d_concat = conv_grads.grad_x.data
    c = m.channels
    grad_base = weights[:, 0:1] * g + d_concat[:, :c]
    grad_refined = weights[:, 1:2] * g + d_concat[:, c:]
    return FusionGrads(Tensor(grad_base), Tensor(grad_refined), conv_grads.grad_weights, conv_grads.grad_bias)


def dsf_backward(m: DsfModule, base: Tensor, refined: Tensor, grad_fused: Tensor) -> FusionGrads:
    _check_pair(base, refined, m.channels)
    g = _check_grad(base, grad_fused)
    pooled = concat_channels(avg_pool_channels(refined), max_pool_channels(base))
    conv = m.spatial_conv.astype(base.dtype)
    gate = sigmoid(conv2d(pooled, conv)).data

    # blend: fused = M * refined + (1 - M) * base
    d_gate = (g * (refined.data - base.data)).sum(axis=1, keepdims=True)
    d_logit = d_gate * gate * (1 - gate)

    conv_grads = conv2d_backward(pooled, conv, Tensor(d_logit))
    d_pooled = conv_grads.grad_x.data

    grad_refined = gate * g + d_pooled[:, 0:1] / base.dtype.type(base.c)
    # max-pool subgradient goes to the lowest-index maximal channel
    routed = np.zeros_like(base.data)
    np.put_along_axis(routed, argmax_channels(base), d_pooled[:, 1:2], axis=1)
    grad_base = (1 - gate) * g + routed
    return FusionGrads(Tensor(grad_base), Tensor(grad_refined), conv_grads.grad_weights, conv_grads.grad_bias)


def fuse_backward(m: FusionModule, base: Tensor, refined: Tensor, grad_fused: Tensor) -> FusionGrads:
    if isinstance(m, AgfModule):
        return agf_backward(m, base, refined, grad_fused)
    return dsf_backward(m, base, refined, grad_fused)


def build_module(spec: FusionSpec, conv: Conv2dParams) -> FusionModule:
    if conv.weights.shape != spec.conv_shape:
        raise ShapeMismatchError(
            f"{spec.method.upper()} with {spec.channels} channels needs conv weights {spec.conv_shape}, "
            f"got {conv.weights.shape}",
            axis="c",
        )
    if spec.method == "agf":
        return AgfModule(conv, spec.channels)
    return DsfModule(conv, spec.channels)


def init_params(spec: FusionSpec, scheme: InitScheme = InitScheme(), dtype: DtypeLike = "f32") -> FusionModule:
    dtype = resolve_dtype(dtype)
    out_channels = spec.conv_shape[0]
    if scheme.kind == "zeros":
        weights = np.zeros(spec.conv_shape, dtype=dtype)
        bias = np.zeros(out_channels, dtype=dtype)
    else:
        weights = rng.uniform(scheme.seed, rng.WEIGHTS, spec.conv_shape, -scheme.scale, scheme.scale).astype(dtype)
        bias = rng.uniform(scheme.seed, rng.BIAS, (out_channels,), -scheme.scale, scheme.scale).astype(dtype)
    logger.debug("Initialised %s (%s) with %s", spec.method, spec.conv_shape, scheme)
    return build_module(spec, Conv2dParams(weights, bias))


def save_params(m: FusionModule, path: Union[str, Path]) -> None:
    """Write `path` (JSON manifest) plus `<stem>.weights.npy` and `<stem>.bias.npy` beside it."""
    path = Path(path)
    weights_file = f"{path.stem}.weights.npy"
    bias_file = f"{path.stem}.bias.npy"
    write_array(m.conv.weights, path.parent / weights_file)
    write_array(m.conv.bias, path.parent / bias_file)
    manifest = {
        "method": m.method,
        "channels": m.channels,
        "kernel_size": m.conv.kernel_size,
        "files": {"weights": weights_file, "bias": bias_file},
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    logger.info("Saved %s parameters to %s", m.method, path)


def _load_manifest(path: Path) -> dict:
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"Weights manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise ManifestError(f"Invalid JSON in weights manifest {path}: {e}")

    if not isinstance(manifest, dict):
        raise ManifestError(f"Weights manifest {path} must be a JSON object")
    for key in ("method", "channels", "kernel_size", "files"):
        if key not in manifest:
            raise ManifestError(f"Weights manifest {path} missing required {key!r} field")
    files = manifest["files"]
    if not isinstance(files, dict) or "weights" not in files or "bias" not in files:
        raise ManifestError(f"Weights manifest {path} needs files.weights and files.bias")
    return manifest


def _load_tensor_file(manifest_path: Path, name: str) -> np.ndarray:
    file_path = manifest_path.parent / name
    try:
        return read_array(file_path)
    except FileNotFoundError:
        raise ManifestError(f"File {file_path} referenced by {manifest_path} not found")


def load_params(manifest_path: Union[str, Path]) -> FusionModule:
    path = Path(manifest_path)
    manifest = _load_manifest(path)
    method, channels = manifest["method"], manifest["channels"]
    # a DSF saved without a channel count accepts any latent
    any_channels = method == "dsf" and channels is None
    try:
        kernel_size = int(manifest["kernel_size"])
        spec = FusionSpec(
            method=method,
            channels=1 if any_channels else int(channels),
            k_agf=kernel_size if method == "agf" else DEFAULT_K_AGF,
        )
    except (TypeError, ValueError) as e:
        raise ManifestError(f"Invalid field in weights manifest {path}: {e}")
    if spec.kernel_size != kernel_size:
        raise ManifestError(f"{method.upper()} kernel size must be {spec.kernel_size}, manifest says {kernel_size}")

    weights = _load_tensor_file(path, manifest["files"]["weights"])
    bias = _load_tensor_file(path, manifest["files"]["bias"])
    if bias.shape != (spec.conv_shape[0],):
        raise ShapeMismatchError(f"Bias in {path} has shape {bias.shape}, expected {(spec.conv_shape[0],)}")
    if weights.dtype != bias.dtype:
        raise DtypeMismatchError(f"Weights are {weights.dtype} but bias is {bias.dtype}")
    module = build_module(spec, Conv2dParams(weights.copy(), bias.copy()))
    if any_channels:
        module = DsfModule(module.spatial_conv)
    logger.info("Loaded %s parameters from %s", spec.method, path)
    return module
