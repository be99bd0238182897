import dataclasses

import numpy as np
import pytest

import latfuse.gradients
from latfuse import rng
from latfuse.errors import GradCheckCapError, GradCheckTieError, InvalidSpecError, NonFiniteError
from latfuse.fusion import InitScheme, fuse_backward
from latfuse.gradients import check_module, compare, finite_diff, max_pool_ties
from latfuse.tensor import Tensor
from tests.utils import MODULE_CONFIGS

EPS = 1e-5
THRESHOLD = 1e-6


def sample(seed: int, shape=(3, 4)) -> np.ndarray:
    return rng.uniform(seed, rng.NOISE, shape, -1.0, 1.0)


def test_linear_function_gives_ones():
    x = sample(1)
    np.testing.assert_allclose(finite_diff(np.sum, x, EPS), np.ones_like(x), atol=1e-8)


def test_quadratic_gives_identity():
    x = sample(2)
    np.testing.assert_allclose(finite_diff(lambda v: 0.5 * (v * v).sum(), x, EPS), x, atol=1e-8)


def test_tensor_inputs_return_tensors():
    x = Tensor(sample(3, (1, 2, 3, 3)))
    grad = finite_diff(lambda t: 0.5 * (t.data**2).sum(), x, EPS)
    assert isinstance(grad, Tensor)
    np.testing.assert_allclose(grad.data, x.data, atol=1e-8)


def test_second_order_convergence():
    x = sample(4, (5,))

    def residual(eps: float) -> float:
        return float(np.abs(finite_diff(lambda v: np.exp(v).sum(), x, eps) - np.exp(x)).max())

    ratio = residual(1e-2) / residual(5e-3)
    assert 3 <= ratio <= 5


def test_rejects_bad_eps_and_dtype():
    with pytest.raises(InvalidSpecError):
        finite_diff(np.sum, sample(5), 0.0)
    with pytest.raises(InvalidSpecError):
        finite_diff(np.sum, sample(5).astype(np.float32), EPS)


def test_non_finite_objective_reports_index():
    x = np.zeros((2, 3))
    x[1, 2] = 1.0

    def blows_up(v):
        return np.inf if v[1, 2] > 1.0 else float(v.sum())

    with pytest.raises(NonFiniteError) as exc:
        finite_diff(blows_up, x, EPS)
    assert tuple(exc.value.index) == (1, 2)


def test_compare_uses_unit_floor():
    check = compare("t", np.array([0.0, 10.0]), np.array([1e-7, 10.001]))
    assert check.max_abs_err == pytest.approx(1e-3)
    assert check.max_rel_err == pytest.approx(1e-3 / 10.001)
    assert check.worst_index == (1,)


def test_max_pool_ties():
    x = np.zeros((1, 3, 1, 2))
    x[0, :, 0, 0] = [1.0, 1.0 + 1e-6, 0.0]
    x[0, :, 0, 1] = [1.0, 0.5, 0.0]
    assert max_pool_ties(x, EPS) == 1
    assert max_pool_ties(x[:, :1], EPS) == 0


def test_tie_is_jittered_once(monkeypatch):
    counts = iter([3, 0])
    monkeypatch.setattr(latfuse.gradients, "max_pool_ties", lambda x, eps: next(counts))
    report = check_module("dsf", (1, 2, 5, 5), 1)
    assert report.jittered
    assert report.passed, "\n".join(report.lines())
    assert "jittered=true" in report.lines()[0]


def test_persistent_tie_fails_loudly(monkeypatch):
    monkeypatch.setattr(latfuse.gradients, "max_pool_ties", lambda x, eps: 1)
    with pytest.raises(GradCheckTieError):
        check_module("dsf", (1, 2, 5, 5), 1)


def test_agf_skips_tie_detection(monkeypatch):
    monkeypatch.setattr(latfuse.gradients, "max_pool_ties", lambda x, eps: 1)
    assert not check_module("agf", (1, 2, 5, 5), 1).jittered


@pytest.mark.parametrize("shape", [(1, 2, 5, 5), (1, 4, 7, 7)])
@pytest.mark.parametrize("method,k_agf", MODULE_CONFIGS)
@pytest.mark.parametrize("seed", [1, 2, 3])
def test_fusion_gradients_match_finite_differences(method, k_agf, shape, seed):
    report = check_module(method, shape, seed, eps=EPS, threshold=THRESHOLD, k_agf=k_agf)
    assert report.passed, "\n".join(report.lines())
    assert [c.name for c in report.checks] == ["grad_base", "grad_refined", "grad_weights", "grad_bias"]


def test_zero_initialised_dsf_passes():
    report = check_module("dsf", (1, 2, 5, 5), 1, init=InitScheme("zeros"))
    assert report.passed, "\n".join(report.lines())


def test_corrupted_weight_gradient_is_located(monkeypatch):
    def corrupted(m, base, refined, grad_fused):
        grads = fuse_backward(m, base, refined, grad_fused)
        grad_weights = grads.grad_weights.copy()
        grad_weights[1, 2, 0, 0] += 1e-2
        return dataclasses.replace(grads, grad_weights=grad_weights)

    monkeypatch.setattr(latfuse.gradients, "fuse_backward", corrupted)
    report = check_module("agf", (1, 2, 5, 5), 1)
    assert not report.passed
    assert report.worst.name == "grad_weights"
    assert report.worst.worst_index == (1, 2, 0, 0)
    assert "passed=false" in report.lines()[0]


def test_element_cap():
    with pytest.raises(GradCheckCapError):
        check_module("dsf", (1, 4, 33, 33), 1)


def test_report_lines_are_key_value():
    report = check_module("dsf", (1, 2, 5, 5), 1)
    lines = report.lines()
    assert lines[0].startswith("method=dsf passed=true")
    assert any(line.startswith("tensor=grad_bias shape=1") for line in lines)
    for line in lines:
        assert all("=" in field for field in line.split())
