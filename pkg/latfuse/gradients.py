"""
Central finite-difference gradient checking for the fusion modules.

Everything here runs in float64. The scalar objective for a module check is
sum(G * fused) with a seeded probe G, so every output element contributes
with its own weight.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from latfuse import rng
from latfuse.errors import GradCheckCapError, GradCheckTieError, InvalidSpecError, NonFiniteError
from latfuse.fusion import FusionModule, FusionSpec, InitScheme, fuse, fuse_backward, init_params
from latfuse.nn_ops import Conv2dParams
from latfuse.parallel import map_ordered
from latfuse.tensor import Tensor, check_shape

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_THRESHOLD = 1e-6
DEFAULT_INIT_SCALE = 0.5
MAX_CHECK_ELEMENTS = 4096
JITTER_SCALE = 1e-3


@dataclass(frozen=True)
class TensorCheck:
    name: str
    shape: Tuple[int, ...]
    max_rel_err: float
    max_abs_err: float
    worst_index: Tuple[int, ...]


@dataclass(frozen=True)
class GradCheckReport:
    method: str
    threshold: float
    checks: Tuple[TensorCheck, ...] = field(default_factory=tuple)
    jittered: bool = False

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def max_abs_err(self) -> float:
        return max((c.max_abs_err for c in self.checks), default=0.0)

    @property
    def worst(self) -> Optional[TensorCheck]:
        return max(self.checks, key=lambda c: c.max_rel_err, default=None)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.threshold

    def lines(self) -> List[str]:
        worst = self.worst
        lines = [
            f"method={self.method} passed={str(self.passed).lower()} threshold={self.threshold:.3e} "
            f"max_rel_err={self.max_rel_err:.3e} max_abs_err={self.max_abs_err:.3e} "
            f"jittered={str(self.jittered).lower()}"
        ]
        if worst is not None:
            lines.append(f"worst_tensor={worst.name} worst_index={_fmt_index(worst.worst_index)}")
        for c in self.checks:
            lines.append(
                f"tensor={c.name} shape={_fmt_index(c.shape)} max_rel_err={c.max_rel_err:.3e} "
                f"max_abs_err={c.max_abs_err:.3e} worst_index={_fmt_index(c.worst_index)}"
            )
        return lines


def _fmt_index(index: Sequence[int]) -> str:
    return "x".join(str(i) for i in index)


def finite_diff(
    f: Callable[[Union[np.ndarray, Tensor]], float],
    x: Union[np.ndarray, Tensor],
    eps: float = DEFAULT_EPS,
) -> Union[np.ndarray, Tensor]:
    """
    Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every element.

    `x` may be a float64 array or Tensor; `f` receives the same kind of object.
    """
    if eps <= 0:
        raise InvalidSpecError(f"eps must be > 0, got {eps}")
    as_tensor = isinstance(x, Tensor)
    base = np.array(x.data if as_tensor else x, copy=True)
    if base.dtype != np.float64:
        raise InvalidSpecError(f"finite_diff needs float64 inputs, got {base.dtype}")

    def evaluate(arr: np.ndarray) -> float:
        return float(f(Tensor(arr) if as_tensor else arr))

    def probe(i: int) -> float:
        arr = base.copy()
        arr.flat[i] = base.flat[i] + eps
        plus = evaluate(arr)
        arr = base.copy()
        arr.flat[i] = base.flat[i] - eps
        minus = evaluate(arr)
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NonFiniteError("objective is not finite", index=np.unravel_index(i, base.shape))
        return (plus - minus) / (2 * eps)

    grad = np.array(map_ordered(probe, range(base.size)), dtype=np.float64).reshape(base.shape)
    return Tensor(grad) if as_tensor else grad


def compare(name: str, analytic: np.ndarray, numeric: np.ndarray) -> TensorCheck:
    """Relative error is |a - n| / max(1, |a|, |n|), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    abs_err = np.abs(analytic - numeric)
    rel_err = abs_err / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    worst = np.unravel_index(int(rel_err.argmax()), rel_err.shape)
    return TensorCheck(
        name=name,
        shape=tuple(analytic.shape),
        max_rel_err=float(rel_err.max()),
        max_abs_err=float(abs_err.max()),
        worst_index=tuple(int(i) for i in worst),
    )


def max_pool_ties(x: np.ndarray, eps: float) -> int:
    """Pixels whose top two channels are within 2*eps, where a probe could flip the max."""
    if x.shape[1] < 2:
        return 0
    top2 = np.sort(x, axis=1)[:, -2:]
    return int(((top2[:, 1] - top2[:, 0]) <= 2 * eps).sum())


def _check_cap(name: str, size: int) -> None:
    if size > MAX_CHECK_ELEMENTS:
        raise GradCheckCapError(f"{name} has {size} elements; the exhaustive check is capped at {MAX_CHECK_ELEMENTS}")


def check_module(
    method: str,
    shape,
    seed: int,
    eps: float = DEFAULT_EPS,
    threshold: float = DEFAULT_THRESHOLD,
    k_agf: int = 1,
    init: Optional[InitScheme] = None,
) -> GradCheckReport:
    """
    Compare the analytic backward pass of one fusion module against central
    differences for both latents, the conv weights and the conv bias.
    """
    shape = check_shape(shape)
    spec = FusionSpec(method, shape[1], k_agf)
    init = init or InitScheme("uniform", scale=DEFAULT_INIT_SCALE, seed=seed)
    module: FusionModule = init_params(spec, init, dtype="f64")

    _check_cap("latent", int(np.prod(shape)))
    _check_cap("conv weights", module.conv.weights.size)

    base = rng.uniform(seed, rng.BASE_INPUT, shape, -1.0, 1.0)
    refined = rng.uniform(seed, rng.REFINED_INPUT, shape, -1.0, 1.0)
    probe = rng.uniform(seed, rng.PROBE, shape, -1.0, 1.0)

    jittered = False
    if method == "dsf" and max_pool_ties(base, eps):
        logger.warning("Max-pool tie in base latent; jittering it once")
        base = base + JITTER_SCALE * rng.uniform(seed, rng.JITTER, shape, -1.0, 1.0)
        jittered = True
        ties = max_pool_ties(base, eps)
        if ties:
            raise GradCheckTieError(f"{ties} max-pool ties persist after jitter")

    base_t, refined_t, probe_t = Tensor(base), Tensor(refined), Tensor(probe)
    conv = module.conv

    def objective(m: FusionModule, b: Tensor, r: Tensor) -> float:
        return float((probe * fuse(m, b, r).fused.data).sum())

    analytic = fuse_backward(module, base_t, refined_t, probe_t)
    numeric = {
        "grad_base": finite_diff(lambda b: objective(module, b, refined_t), base_t, eps).data,
        "grad_refined": finite_diff(lambda r: objective(module, base_t, r), refined_t, eps).data,
        "grad_weights": finite_diff(
            lambda w: objective(module.with_conv(Conv2dParams(w, conv.bias.copy())), base_t, refined_t),
            conv.weights,
            eps,
        ),
        "grad_bias": finite_diff(
            lambda bias: objective(module.with_conv(Conv2dParams(conv.weights.copy(), bias)), base_t, refined_t),
            conv.bias,
            eps,
        ),
    }
    checks = (
        compare("grad_base", analytic.grad_base.data, numeric["grad_base"]),
        compare("grad_refined", analytic.grad_refined.data, numeric["grad_refined"]),
        compare("grad_weights", analytic.grad_weights, numeric["grad_weights"]),
        compare("grad_bias", analytic.grad_bias, numeric["grad_bias"]),
    )
    report = GradCheckReport(method=method, threshold=threshold, checks=checks, jittered=jittered)
    logger.debug("Gradient check %s %s seed=%d: max_rel_err=%.3e", method, shape, seed, report.max_rel_err)
    return report
