"""Performance memory and task sampling for episodic training.

The memory keeps one running value per class, reset to zero at the start of
every episode, and folded against fresh query accuracies by
``value = (value + accuracy) / 2``. Dynamic sampling sorts the memory
ascending and takes the lowest-valued classes, so poorly performing classes
are revisited first. Ties (always present right after a reset) break by
least-recently-sampled step, then by a seeded random draw, which guarantees
every class is visited before any repeat while values are still level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingBank
from .model import Batch

__all__ = [
    "TaskShape",
    "Task",
    "EpisodePlan",
    "PerformanceMemory",
    "initialize_episode",
    "select_classes",
    "update_memory",
    "random_task_classes",
    "sample_task",
]

SAMPLER_KINDS = ("dynamic", "random")


@dataclass(frozen=True)
class TaskShape:
    """N-way K-shot Q-query task dimensions."""

    n_way: int
    k_shot: int
    q_query: int

    def __post_init__(self):
        if self.n_way < 1 or self.k_shot < 1 or self.q_query < 1:
            raise ValueError("n_way, k_shot, and q_query must all be positive")

    @property
    def per_class(self) -> int:
        return self.k_shot + self.q_query


@dataclass(frozen=True)
class Task:
    """One sampled task: chosen classes plus disjoint support and query batches."""

    class_ids: tuple[int, ...]
    support: Batch
    query: Batch
    local_label_map: dict[int, int]


@dataclass(frozen=True)
class EpisodePlan:
    """How many tasks one episode holds and how their classes are picked."""

    tasks_per_episode: int
    sampler: str
    seed: int

    def __post_init__(self):
        if self.tasks_per_episode < 1:
            raise ValueError("an episode needs at least one task")
        if self.sampler not in SAMPLER_KINDS:
            raise ValueError(
                f"unknown sampler {self.sampler!r}; expected one of {SAMPLER_KINDS}"
            )


class PerformanceMemory:
    """Per-class running values plus recency bookkeeping for tie-breaking.

    Single-writer: selections within an episode depend on the previous task's
    update, so callers must drive it sequentially.
    """

    def __init__(self, class_ids):
        ids = [int(c) for c in class_ids]
        if len(ids) != len(set(ids)):
            raise ValueError("class universe contains duplicates")
        self.values: dict[int, float] = {c: 0.0 for c in ids}
        self.last_sampled_step: dict[int, int] = {c: 0 for c in ids}
        self.step: int = 0

    @property
    def class_count(self) -> int:
        return len(self.values)

    def snapshot(self) -> dict[int, float]:
        return dict(self.values)


def initialize_episode(memory: PerformanceMemory) -> PerformanceMemory:
    """Reset every value to exactly zero and clear recency state."""
    for c in memory.values:
        memory.values[c] = 0.0
        memory.last_sampled_step[c] = 0
    memory.step = 0
    return memory


def select_classes(
    memory: PerformanceMemory, n_way: int, rng: np.random.Generator
) -> list[int]:
    """The ``n_way`` classes with the smallest memory values.

    Ordering key is (value, last sampled step, seeded random draw), so the
    global argmin-value class is always included and level ties favour the
    least recently sampled class.
    """
    ids = sorted(memory.values)
    if n_way > len(ids):
        raise ValueError(f"n_way {n_way} exceeds class count {len(ids)}")
    draws = {c: rng.random() for c in ids}
    ordered = sorted(
        ids, key=lambda c: (memory.values[c], memory.last_sampled_step[c], draws[c])
    )
    return ordered[:n_way]


def update_memory(
    memory: PerformanceMemory, class_accuracies: dict[int, float]
) -> PerformanceMemory:
    """Fold reported accuracies into the memory; untouched keys keep their value."""
    for c, acc in class_accuracies.items():
        if c not in memory.values:
            raise ValueError(f"class {c} is outside the memory's class universe")
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} for class {c} lies outside [0, 1]")
    memory.step += 1
    for c in sorted(class_accuracies):
        memory.values[c] = (memory.values[c] + class_accuracies[c]) / 2.0
        memory.last_sampled_step[c] = memory.step
    return memory


def random_task_classes(
    class_count: int, n_way: int, rng: np.random.Generator
) -> list[int]:
    """Uniform distinct ``n_way``-subset of 0..class_count-1."""
    if n_way > class_count:
        raise ValueError(f"n_way {n_way} exceeds class count {class_count}")
    return [int(c) for c in rng.choice(class_count, size=n_way, replace=False)]


def sample_task(
    bank: EmbeddingBank,
    shape: TaskShape,
    class_ids,
    rng: np.random.Generator,
) -> Task:
    """Draw disjoint support and query rows for the given classes.

    Per class, ``k_shot + q_query`` distinct rows are drawn uniformly without
    replacement; the first ``k_shot`` go to the support set.
    """
    class_ids = tuple(int(c) for c in class_ids)
    if len(set(class_ids)) != len(class_ids):
        raise ValueError(f"duplicate class ids in {class_ids}")
    local_map = {c: i for i, c in enumerate(class_ids)}

    support_rows, query_rows = [], []
    for c in class_ids:
        rows = bank.class_rows(c)
        if rows.size < shape.per_class:
            raise ValueError(
                f"class {c} has {rows.size} instances, task shape needs "
                f"{shape.per_class}"
            )
        picked = rows[rng.choice(rows.size, size=shape.per_class, replace=False)]
        support_rows.extend(picked[: shape.k_shot].tolist())
        query_rows.extend(picked[shape.k_shot :].tolist())

    def batch(rows: list[int]) -> Batch:
        return Batch(
            embeddings=bank.features[rows],
            labels=bank.labels[rows],
            restriction=local_map,
        )

    return Task(
        class_ids=class_ids,
        support=batch(support_rows),
        query=batch(query_rows),
        local_label_map=local_map,
    )
