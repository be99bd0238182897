"""
Seeded synthetic latents standing in for the base and refiner stages.

Low-frequency sinusoids play the role of the base latent's global structure;
high-frequency sinusoids added on top play the refiner's detail. Every
parameter is drawn from latfuse.rng, so a SynthSpec maps to one tensor.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from latfuse import rng
from latfuse.errors import InvalidSpecError
from latfuse.tensor import DtypeLike, Shape, Tensor, check_shape, resolve_dtype

logger = logging.getLogger(__name__)

KINDS = ("noise", "lowfreq", "highfreq", "structured-pair")
TERMS = 4
LOW_BAND = (0, 2)
DETAIL_RATIO = 0.25
MAX_SEED = 2**64 - 1


@dataclass(frozen=True)
class SynthSpec:
    kind: str
    shape: Shape
    seed: int = 0
    amplitude: float = 1.0
    dtype: DtypeLike = "f32"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"Unknown synth kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "shape", check_shape(self.shape))
        if not 0 <= self.seed <= MAX_SEED:
            raise InvalidSpecError(f"Seed must fit in 64 unsigned bits, got {self.seed}")
        if not (np.isfinite(self.amplitude) and self.amplitude >= 0):
            raise InvalidSpecError(f"Amplitude must be finite and >= 0, got {self.amplitude}")
        resolve_dtype(self.dtype)


def _detail_band(h: int, w: int) -> Tuple[int, int]:
    side = max(h, w)
    lo = max(3, side // 16)
    return lo, max(lo + 1, side // 4)


def _sinusoids(seed: int, stream: int, shape: Shape, band: Tuple[int, int], amplitude: float) -> np.ndarray:
    n, c, h, w = shape
    planes = n * c
    u = rng.uniform01(seed, stream, planes * TERMS * 4).reshape(planes, TERMS, 4)

    weights = 0.5 + 0.5 * u[..., 0]
    weights = weights / weights.sum(axis=1, keepdims=True) * amplitude
    lo, hi = band
    span = hi - lo + 1
    fy = lo + np.floor(u[..., 1] * span)
    fx = lo + np.floor(u[..., 2] * span)
    # a (0, 0) term would be a flat offset, not structure
    fx = np.where((fy == 0) & (fx == 0), 1.0, fx)
    phase = 2 * np.pi * u[..., 3]

    yy = (np.arange(h, dtype=np.float64) / h)[:, None]
    xx = (np.arange(w, dtype=np.float64) / w)[None, :]
    field = np.zeros((planes, h, w), dtype=np.float64)
    for t in range(TERMS):
        arg = 2 * np.pi * (fy[:, t, None, None] * yy + fx[:, t, None, None] * xx) + phase[:, t, None, None]
        field += weights[:, t, None, None] * np.sin(arg)
    return field.reshape(shape)


def _lowfreq(spec: SynthSpec) -> np.ndarray:
    return _sinusoids(spec.seed, rng.STRUCTURE, spec.shape, LOW_BAND, spec.amplitude)


def _detail(spec: SynthSpec) -> np.ndarray:
    _, _, h, w = spec.shape
    return _sinusoids(spec.seed, rng.DETAIL, spec.shape, _detail_band(h, w), DETAIL_RATIO * spec.amplitude)


def generate(spec: SynthSpec) -> Tensor:
    if spec.kind == "noise":
        field = rng.uniform(spec.seed, rng.NOISE, spec.shape, -spec.amplitude, spec.amplitude)
    elif spec.kind == "lowfreq":
        field = _lowfreq(spec)
    elif spec.kind == "highfreq":
        field = _lowfreq(spec) + _detail(spec)
    else:
        raise InvalidSpecError("structured-pair produces two tensors; use generate_pair")
    logger.debug("Generated %s %s seed=%d", spec.kind, spec.shape, spec.seed)
    return Tensor(field.astype(resolve_dtype(spec.dtype)))


def generate_pair(spec: SynthSpec) -> Tuple[Tensor, Tensor]:
    """(base, refined): shared low-frequency structure, refined adds detail on top."""
    if spec.kind != "structured-pair":
        raise InvalidSpecError(f"generate_pair needs kind 'structured-pair', got {spec.kind!r}")
    dtype = resolve_dtype(spec.dtype)
    base = _lowfreq(spec)
    refined = base + _detail(spec)
    logger.debug("Generated structured pair %s seed=%d", spec.shape, spec.seed)
    return Tensor(base.astype(dtype)), Tensor(refined.astype(dtype))


def detail_energy(t: Tensor) -> float:
    """Mean absolute difference between neighbouring pixels, rows and columns pooled."""
    data = t.data.astype(np.float64)
    diffs = []
    if t.w > 1:
        diffs.append(np.abs(np.diff(data, axis=3)).ravel())
    if t.h > 1:
        diffs.append(np.abs(np.diff(data, axis=2)).ravel())
    if not diffs:
        return 0.0
    return float(np.concatenate(diffs).mean())
