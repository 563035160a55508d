"""Shared fixtures and independent oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from metaepisodic import diffcore as dc
from metaepisodic.data import SyntheticSpec, generate
from metaepisodic.episodic import TaskShape, random_task_classes, sample_task
from metaepisodic.model import AdapterObjective, AdapterParams, Batch


class QuadraticObjective:
    """L(theta) = 0.5 * theta^T A theta; ignores the batch, returns no scores."""

    def __init__(self, a):
        self.a = dc.as_matrix(a)

    @property
    def param_length(self) -> int:
        return self.a.shape[0]

    def build(self, params, batch):
        t = dc.matvec(self.a, params)
        return dc.scale(0.5, dc.dot(params, t)), None


class ScaledObjective:
    """c * wrapped loss; used for gradient-linearity checks."""

    def __init__(self, inner, c: float):
        self.inner = inner
        self.c = c

    @property
    def param_length(self) -> int:
        return self.inner.param_length

    def build(self, params, batch):
        loss, scores = self.inner.build(params, batch)
        return dc.scale(self.c, loss), scores


def fd_gradient(obj, theta, batch, h=1e-5):
    """Central-difference gradient oracle, independent of the tape."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        plus, _ = dc.evaluate(obj, theta + step, batch)
        minus, _ = dc.evaluate(obj, theta - step, batch)
        grad[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(candidate, oracle) -> float:
    """Max absolute difference relative to the oracle's largest component."""
    candidate = np.asarray(candidate, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    return float(np.max(np.abs(candidate - oracle)) / max(np.max(np.abs(oracle)), 1e-10))


def dummy_batch() -> Batch:
    """Minimal batch for objectives that never look at their batch."""
    return Batch(embeddings=np.zeros((1, 1)), labels=np.array([0]))


@pytest.fixture(scope="session")
def small_problem():
    """An 8-dim bank with mild multi-mode structure plus its adapter objective."""
    spec = SyntheticSpec(
        class_count=5,
        dim=8,
        modes_per_class=(2,) * 5,
        spread_per_class=(0.4,) * 5,
        separation=0.6,
        examples_per_class=20,
        seed=3,
    )
    bank, prototypes = generate(spec)
    obj = AdapterObjective(prototypes=prototypes, dim=8, hidden=16)
    return bank, prototypes, obj


def small_task(bank, seed: int, shape: TaskShape = TaskShape(3, 5, 5)):
    rng = np.random.default_rng(seed)
    class_ids = random_task_classes(bank.class_count, shape.n_way, rng)
    return sample_task(bank, shape, class_ids, rng)


def small_theta(dim: int = 8, hidden: int = 16, seed: int = 11) -> np.ndarray:
    return AdapterParams.seeded(dim, hidden, np.random.default_rng(seed)).flatten()
