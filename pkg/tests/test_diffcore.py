"""Gradient and Hessian-vector-product checks against independent oracles."""

import numpy as np
import pytest

from metaepisodic import diffcore as dc
from metaepisodic.diffcore import DimensionError, Node, NumericError
from metaepisodic.model import Batch

from conftest import (
    QuadraticObjective,
    ScaledObjective,
    dummy_batch,
    fd_gradient,
    relative_error,
    small_task,
    small_theta,
)


def test_gradient_of_scalar_square_is_two_theta():
    obj = QuadraticObjective([[2.0]])  # L = theta^2
    g = dc.gradient(obj, [1.0], dummy_batch())
    assert g == pytest.approx([2.0], abs=1e-12)


def test_gradient_unchanged_by_duplicating_every_example(small_problem):
    bank, _, obj = small_problem
    theta = small_theta()
    rows = bank.class_rows(0)[:2]
    once = Batch(bank.features[rows], bank.labels[rows])
    twice = Batch(
        np.vstack([bank.features[rows], bank.features[rows]]),
        np.concatenate([bank.labels[rows], bank.labels[rows]]),
    )
    g1 = dc.gradient(obj, theta, once)
    g2 = dc.gradient(obj, theta, twice)
    assert np.max(np.abs(g1 - g2)) <= 1e-12


def test_adapter_gradient_matches_finite_differences(small_problem):
    bank, _, obj = small_problem
    task = small_task(bank, seed=7)
    theta = small_theta()
    analytic = dc.gradient(obj, theta, task.support)
    oracle = fd_gradient(obj, theta, task.support, h=1e-5)
    assert relative_error(analytic, oracle) <= 1e-6


@pytest.mark.parametrize("c", [-1.0, 0.5, 3.0])
def test_gradient_linearity_in_loss_scale(small_problem, c):
    bank, _, obj = small_problem
    task = small_task(bank, seed=5)
    theta = small_theta()
    base = dc.gradient(obj, theta, task.support)
    scaled = dc.gradient(ScaledObjective(obj, c), theta, task.support)
    assert np.max(np.abs(scaled - c * base)) <= 1e-12


def test_hvp_on_quadratic_is_hessian_times_v():
    obj = QuadraticObjective([[2.0, 0.0], [0.0, 4.0]])
    hv = dc.hvp(obj, [0.3, -0.2], dummy_batch(), [1.0, 1.0])
    assert hv == pytest.approx([2.0, 4.0], abs=1e-9)


def test_hvp_zero_direction_returns_exact_zeros(small_problem):
    bank, _, obj = small_problem
    task = small_task(bank, seed=9)
    theta = small_theta()
    hv = dc.hvp(obj, theta, task.support, np.zeros_like(theta))
    assert np.all(hv == 0.0)


def test_hvp_symmetry_over_random_pairs(small_problem):
    bank, _, obj = small_problem
    task = small_task(bank, seed=13)
    theta = small_theta()
    rng = np.random.default_rng(42)
    for _ in range(20):
        u = rng.standard_normal(theta.size)
        v = rng.standard_normal(theta.size)
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        hu = dc.hvp(obj, theta, task.support, u)
        hv = dc.hvp(obj, theta, task.support, v)
        lhs, rhs = float(hu @ v), float(u @ hv)
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), abs(rhs), 1.0)


def test_hvp_homogeneity_in_direction(small_problem):
    bank, _, obj = small_problem
    task = small_task(bank, seed=17)
    theta = small_theta()
    rng = np.random.default_rng(1)
    v = rng.standard_normal(theta.size)
    base = dc.hvp(obj, theta, task.support, v)
    for c in (-2.0, 0.25, 3.0):
        scaled = dc.hvp(obj, theta, task.support, c * v)
        assert relative_error(scaled, c * base) <= 1e-5


def test_gradient_rejects_wrong_parameter_length(small_problem):
    bank, _, obj = small_problem
    task = small_task(bank, seed=3)
    with pytest.raises(DimensionError):
        dc.gradient(obj, np.zeros(obj.param_length + 1), task.support)


def test_hvp_rejects_zero_length_and_mismatched_direction():
    obj = QuadraticObjective([[2.0]])
    with pytest.raises(DimensionError):
        dc.hvp(obj, [1.0], dummy_batch(), [])
    with pytest.raises(DimensionError):
        dc.hvp(obj, [1.0], dummy_batch(), [1.0, 2.0])


class _NonFiniteObjective:
    param_length = 1

    def build(self, params, batch):
        return Node(float("inf")), None


def test_non_finite_loss_raises_numeric_error_naming_stage():
    with pytest.raises(NumericError, match="loss"):
        dc.gradient(_NonFiniteObjective(), [0.0], dummy_batch())


def test_vector_and_matrix_constructors_reject_bad_input():
    with pytest.raises(NumericError):
        dc.as_vector([1.0, float("nan")])
    with pytest.raises(DimensionError):
        dc.as_vector([[1.0]])
    with pytest.raises(NumericError):
        dc.as_matrix([[np.inf]])
    with pytest.raises(DimensionError):
        dc.as_matrix([1.0, 2.0])
    with pytest.raises(DimensionError):
        dc.as_matrix([[1.0, 2.0]], rows=2, cols=2)


def test_ops_reject_shape_mismatches():
    a = dc.constant(np.ones((2, 3)))
    b = dc.constant(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        dc.matmul(a, b)
    with pytest.raises(DimensionError):
        dc.add_bias(a, dc.constant(np.ones(2)))
    with pytest.raises(DimensionError):
        dc.dot(dc.constant(np.ones(2)), dc.constant(np.ones(3)))


def test_normalize_rows_rejects_zero_rows():
    x = dc.constant(np.array([[1.0, 0.0], [0.0, 0.0]]))
    with pytest.raises(NumericError, match="zero-norm row 1"):
        dc.normalize_rows(x)
