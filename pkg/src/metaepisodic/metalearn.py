"""Bi-level adapter optimization.

The main path is second-order: one inner gradient step on the support set
produces adapted parameters, and the meta-gradient of the query loss flows
back through that step, including the Hessian-vector correction and an exact
derivative for the inner learning rate, which is itself meta-learned. The
inner rate is a scalar by default or a per-parameter vector (the learned-rate
competitor). First-order and interpolation-style competitors share the same
task plumbing. The meta-optimizer is Adam with bias correction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .data import EmbeddingBank
from .diffcore import DifferentiableObjective, NumericError
from .episodic import (
    EpisodePlan,
    PerformanceMemory,
    Task,
    TaskShape,
    initialize_episode,
    random_task_classes,
    sample_task,
    select_classes,
    update_memory,
)
from .model import AdapterObjective, AdapterParams, ClassPrototypes, accuracy_by_class

__all__ = [
    "ALGORITHMS",
    "UnsupportedConfigError",
    "MetaParams",
    "MetaGradient",
    "AdamState",
    "TaskResult",
    "TrainConfig",
    "TaskStepRecord",
    "MetricsLog",
    "EvalSummary",
    "inner_adapt",
    "meta_gradient_maml",
    "meta_gradient_fomaml",
    "reptile_update",
    "adam_step",
    "evaluate_task",
    "train",
    "adapt_and_eval",
    "sample_eval_tasks",
    "evaluate_fixture",
]

logger = logging.getLogger(__name__)

ALGORITHMS = ("maml", "fomaml", "reptile", "metasgd")


class UnsupportedConfigError(ValueError):
    """The requested optimizer configuration is not defined."""


@dataclass(frozen=True)
class MetaParams:
    """Adapter parameters plus the meta-learned inner rate.

    ``alpha`` has length 1 (scalar rate, broadcast) or the length of
    ``theta`` (per-parameter rates). It is kept non-negative.
    """

    theta: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        theta = dc.as_vector(self.theta)
        alpha = dc.as_vector(self.alpha)
        if alpha.shape[0] not in (1, theta.shape[0]):
            raise dc.DimensionError(
                f"alpha length {alpha.shape[0]} must be 1 or {theta.shape[0]}"
            )
        if np.any(alpha < 0.0):
            raise ValueError("inner rate must be non-negative")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "alpha", alpha)

    @property
    def per_parameter(self) -> bool:
        return self.alpha.shape[0] > 1


@dataclass(frozen=True)
class MetaGradient:
    """Gradient of the outer objective with respect to (theta, alpha)."""

    dtheta: np.ndarray
    dalpha: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dtheta", dc.as_vector(self.dtheta))
        object.__setattr__(self, "dalpha", dc.as_vector(self.dalpha))


@dataclass
class AdamState:
    """Bias-corrected Adam moments over the concatenated (theta, alpha)."""

    m: np.ndarray
    v: np.ndarray
    step: int
    rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, mp: MetaParams, rate: float) -> "AdamState":
        n = mp.theta.shape[0] + mp.alpha.shape[0]
        return cls(m=np.zeros(n), v=np.zeros(n), step=0, rate=rate)


@dataclass(frozen=True)
class TaskResult:
    """Outcome of adapting to and evaluating one task."""

    adapted_theta: np.ndarray
    inner_loss: float
    outer_loss: float
    per_class_query_accuracy: dict[int, float]

    @property
    def mean_query_accuracy(self) -> float:
        # Balanced query sets: the class mean equals the example mean.
        return float(np.mean(list(self.per_class_query_accuracy.values())))


def inner_adapt(
    mp: MetaParams, obj: DifferentiableObjective, support, steps: int
) -> np.ndarray:
    """``steps`` sequential gradient steps on the support loss.

    Each step is ``theta <- theta - alpha * grad`` with the scalar rate
    broadcast across coordinates.
    """
    theta, _ = _adapt_with_gradients(mp, obj, support, steps)
    return theta


def _adapt_with_gradients(
    mp: MetaParams, obj: DifferentiableObjective, support, steps: int
) -> tuple[np.ndarray, list[np.ndarray]]:
    if steps < 1:
        raise ValueError(f"adaptation needs at least one step, got {steps}")
    theta = mp.theta.copy()
    grads = []
    for step in range(steps):
        try:
            g = dc.gradient(obj, theta, support)
        except NumericError as exc:
            raise NumericError(f"inner step {step}: {exc}") from exc
        grads.append(g)
        theta = theta - mp.alpha * g
    return theta, grads


def meta_gradient_maml(
    mp: MetaParams, obj: DifferentiableObjective, task: Task, inner_steps: int = 1
) -> MetaGradient:
    """Exact meta-gradient through a single inner step.

    With g_in the support gradient at theta, theta* = theta - alpha*g_in and
    g_out the query gradient at theta*:

        dtheta = g_out - H(theta) (alpha*g_out)
        dalpha = -<g_in, g_out>        (scalar rate)
        dalpha_j = -g_in_j * g_out_j   (per-parameter rates)

    The Hessian-vector term comes from central differences of the support
    gradient; the alpha derivative is exact since g_in does not depend on it.
    """
    if inner_steps != 1:
        raise UnsupportedConfigError(
            "second-order meta-gradients are defined for a single inner step; "
            f"got {inner_steps}"
        )
    g_in = dc.gradient(obj, mp.theta, task.support)
    theta_star = mp.theta - mp.alpha * g_in
    g_out = dc.gradient(obj, theta_star, task.query)
    correction = dc.hvp(obj, mp.theta, task.support, mp.alpha * g_out)
    dtheta = g_out - correction
    dalpha = _alpha_gradient(mp, g_in, g_out)
    return MetaGradient(dtheta=dtheta, dalpha=dalpha)


def meta_gradient_fomaml(
    mp: MetaParams, obj: DifferentiableObjective, task: Task, inner_steps: int = 1
) -> MetaGradient:
    """First-order meta-gradient: the Hessian correction is dropped.

    The alpha derivative keeps the exact inner-gradient term; for several
    inner steps the per-step support gradients accumulate.
    """
    theta_star, inner_grads = _adapt_with_gradients(mp, obj, task.support, inner_steps)
    g_out = dc.gradient(obj, theta_star, task.query)
    g_in_total = np.sum(inner_grads, axis=0)
    return MetaGradient(dtheta=g_out, dalpha=_alpha_gradient(mp, g_in_total, g_out))


def _alpha_gradient(mp: MetaParams, g_in: np.ndarray, g_out: np.ndarray) -> np.ndarray:
    if mp.per_parameter:
        return -(g_in * g_out)
    return np.array([-float(g_in @ g_out)])


def reptile_update(
    mp: MetaParams,
    obj: DifferentiableObjective,
    task: Task,
    inner_steps: int,
    reptile_rate: float,
) -> MetaParams:
    """Move the initialization toward the task's adapted parameters.

    ``theta <- theta + rate * (theta* - theta)``; the inner rate is fixed.
    """
    theta_star = inner_adapt(mp, obj, task.support, inner_steps)
    return MetaParams(
        theta=mp.theta + reptile_rate * (theta_star - mp.theta),
        alpha=mp.alpha,
    )


def adam_step(
    state: AdamState, mp: MetaParams, grad: MetaGradient
) -> tuple[AdamState, MetaParams]:
    """One bias-corrected Adam update over (theta, alpha); alpha is clamped >= 0."""
    flat = np.concatenate([mp.theta, mp.alpha])
    g = np.concatenate([grad.dtheta, grad.dalpha])
    if g.shape != flat.shape:
        raise dc.DimensionError(
            f"meta-gradient length {g.shape[0]} != parameter length {flat.shape[0]}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    flat = flat - state.rate * m_hat / (np.sqrt(v_hat) + state.eps)
    n_theta = mp.theta.shape[0]
    alpha = np.maximum(flat[n_theta:], 0.0)
    return state, MetaParams(theta=flat[:n_theta], alpha=alpha)


def evaluate_task(
    mp: MetaParams, obj: AdapterObjective, task: Task, inner_steps: int
) -> TaskResult:
    """Adapt on the support set, then measure the query set at theta*."""
    inner_loss, _ = dc.evaluate(obj, mp.theta, task.support)
    theta_star = inner_adapt(mp, obj, task.support, inner_steps)
    outer_loss, scores = dc.evaluate(obj, theta_star, task.query)
    local_acc = accuracy_by_class(scores, task.query.local_labels())
    per_class = {task.class_ids[local]: acc for local, acc in local_acc.items()}
    return TaskResult(
        adapted_theta=theta_star,
        inner_loss=inner_loss,
        outer_loss=outer_loss,
        per_class_query_accuracy=per_class,
    )


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run; task shape and episode plan come separately."""

    epochs: int
    episodes_per_epoch: int
    meta_batch: int = 1
    outer_lr: float = 1e-4
    init_inner_lr: float = 0.01
    inner_steps: int = 1
    reptile_rate: float = 0.5
    adapter_hidden: int = 16
    blend_ratio: float = 0.5
    logit_scale: float = 10.0

    def __post_init__(self):
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and episodes_per_epoch >= 1")
        if self.meta_batch < 1 or self.inner_steps < 1:
            raise ValueError("meta_batch and inner_steps must be positive")
        if self.outer_lr <= 0 or self.init_inner_lr < 0 or self.reptile_rate < 0:
            raise ValueError("rates must be non-negative (outer_lr positive)")


@dataclass(frozen=True)
class TaskStepRecord:
    """Per-meta-step training metrics."""

    epoch: int
    episode: int
    task: int
    inner_loss: float
    outer_loss: float
    mean_query_accuracy: float
    per_class_accuracy: dict[int, float]
    memory_snapshot: dict[int, float]


@dataclass
class MetricsLog:
    records: list[TaskStepRecord] = field(default_factory=list)


@dataclass(frozen=True)
class EvalSummary:
    """Aggregate accuracy over a fixed list of evaluation tasks."""

    overall_accuracy: float
    per_class_accuracy: dict[int, float]
    min_class_accuracy: float
    worst3_mean_accuracy: float
    task_count: int


def _check_floor(bank: EmbeddingBank, shape: TaskShape) -> None:
    counts = bank.per_class_counts()
    if shape.n_way > bank.class_count:
        raise ValueError(
            f"n_way {shape.n_way} exceeds bank's {bank.class_count} classes"
        )
    short = np.flatnonzero(counts < shape.per_class)
    if short.size:
        raise ValueError(
            f"class {int(short[0])} has {int(counts[short[0]])} instances, "
            f"task shape needs {shape.per_class}"
        )


def train(
    algorithm: str,
    bank: EmbeddingBank,
    prototypes: ClassPrototypes,
    plan: EpisodePlan,
    shape: TaskShape,
    config: TrainConfig,
) -> tuple[MetaParams, MetricsLog]:
    """Run episodic meta-training and return the final parameters plus logs.

    Per episode the performance memory resets; per meta-step the sampler
    picks classes (from the memory or uniformly), a task is drawn, the inner
    loop adapts on its support set, the outer objective is measured on its
    query set, the meta-update is applied, and finally the memory absorbs the
    task's per-class query accuracies. Fully deterministic in the plan seed.
    """
    if algorithm not in ALGORITHMS:
        raise UnsupportedConfigError(
            f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}"
        )
    _check_floor(bank, shape)

    init_seed, task_seed = np.random.SeedSequence(plan.seed).spawn(2)
    init_rng = np.random.default_rng(init_seed)
    rng = np.random.default_rng(task_seed)

    obj = AdapterObjective(
        prototypes=prototypes,
        dim=bank.dim,
        hidden=config.adapter_hidden,
        blend=config.blend_ratio,
        logit_scale=config.logit_scale,
    )
    theta0 = AdapterParams.seeded(
        bank.dim, config.adapter_hidden, init_rng, config.blend_ratio, config.logit_scale
    ).flatten()
    if algorithm == "metasgd":
        alpha0 = np.full(theta0.shape[0], config.init_inner_lr)
    else:
        alpha0 = np.array([config.init_inner_lr])
    mp = MetaParams(theta=theta0, alpha=alpha0)

    second_order = algorithm in ("maml", "metasgd")
    if second_order and config.inner_steps > 1:
        logger.warning(
            "second-order meta-gradients need a single inner step; "
            "falling back to the first-order gradient for %d steps",
            config.inner_steps,
        )
        second_order = False
    uses_adam = algorithm != "reptile"
    adam = AdamState.fresh(mp, config.outer_lr) if uses_adam else None

    memory = PerformanceMemory(range(bank.class_count))
    log = MetricsLog()

    for epoch in range(config.epochs):
        for episode in range(config.episodes_per_epoch):
            initialize_episode(memory)
            for step in range(plan.tasks_per_episode):
                try:
                    mp = _meta_step(
                        mp,
                        obj,
                        bank,
                        shape,
                        plan.sampler,
                        algorithm,
                        second_order,
                        adam,
                        memory,
                        rng,
                        config,
                        log,
                        epoch,
                        episode,
                        step,
                    )
                except NumericError as exc:
                    raise NumericError(
                        f"epoch {epoch} episode {episode} task {step}: {exc}"
                    ) from exc
    return mp, log


def _meta_step(
    mp: MetaParams,
    obj: AdapterObjective,
    bank: EmbeddingBank,
    shape: TaskShape,
    sampler: str,
    algorithm: str,
    second_order: bool,
    adam: AdamState | None,
    memory: PerformanceMemory,
    rng: np.random.Generator,
    config: TrainConfig,
    log: MetricsLog,
    epoch: int,
    episode: int,
    step: int,
) -> MetaParams:
    """Sample, adapt, meta-update, then record; returns the updated parameters."""
    results: list[TaskResult] = []
    grads: list[MetaGradient] = []
    for _ in range(config.meta_batch):
        if sampler == "dynamic":
            class_ids = select_classes(memory, shape.n_way, rng)
        else:
            class_ids = random_task_classes(bank.class_count, shape.n_way, rng)
        task = sample_task(bank, shape, class_ids, rng)
        results.append(evaluate_task(mp, obj, task, config.inner_steps))
        if algorithm == "reptile":
            continue
        if second_order:
            grads.append(meta_gradient_maml(mp, obj, task, config.inner_steps))
        else:
            grads.append(meta_gradient_fomaml(mp, obj, task, config.inner_steps))

    if algorithm == "reptile":
        mean_adapted = np.mean([r.adapted_theta for r in results], axis=0)
        mp = MetaParams(
            theta=mp.theta + config.reptile_rate * (mean_adapted - mp.theta),
            alpha=mp.alpha,
        )
    else:
        mean_grad = MetaGradient(
            dtheta=np.mean([g.dtheta for g in grads], axis=0),
            dalpha=np.mean([g.dalpha for g in grads], axis=0),
        )
        _, mp = adam_step(adam, mp, mean_grad)

    # Memory updates follow the meta-update, one per task, in sampling order.
    merged_acc: dict[int, float] = {}
    for result in results:
        if sampler == "dynamic":
            update_memory(memory, result.per_class_query_accuracy)
        merged_acc.update(result.per_class_query_accuracy)

    log.records.append(
        TaskStepRecord(
            epoch=epoch,
            episode=episode,
            task=step,
            inner_loss=float(np.mean([r.inner_loss for r in results])),
            outer_loss=float(np.mean([r.outer_loss for r in results])),
            mean_query_accuracy=float(
                np.mean([r.mean_query_accuracy for r in results])
            ),
            per_class_accuracy=merged_acc,
            memory_snapshot=memory.snapshot(),
        )
    )
    return mp


def adapt_and_eval(
    mp: MetaParams,
    obj: AdapterObjective,
    bank: EmbeddingBank,
    shape: TaskShape,
    inner_steps: int,
    rng: np.random.Generator,
) -> TaskResult:
    """Adapt to one uniformly sampled test task and score its query set.

    Test-time sampling uses no performance memory; callers aggregate the
    returned results over many tasks.
    """
    _check_floor(bank, shape)
    class_ids = random_task_classes(bank.class_count, shape.n_way, rng)
    task = sample_task(bank, shape, class_ids, rng)
    return evaluate_task(mp, obj, task, inner_steps)


def sample_eval_tasks(
    bank: EmbeddingBank, shape: TaskShape, n_tasks: int, seed: int
) -> list[Task]:
    """A fixed, seed-determined list of uniformly sampled evaluation tasks."""
    _check_floor(bank, shape)
    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(n_tasks):
        class_ids = random_task_classes(bank.class_count, shape.n_way, rng)
        tasks.append(sample_task(bank, shape, class_ids, rng))
    return tasks


def evaluate_fixture(
    mp: MetaParams, obj: AdapterObjective, tasks: list[Task], inner_steps: int
) -> EvalSummary:
    """Accuracy aggregated per class and overall across a fixed task list."""
    correct: dict[int, int] = {}
    total: dict[int, int] = {}
    for task in tasks:
        theta_star = inner_adapt(mp, obj, task.support, inner_steps)
        _, scores = dc.evaluate(obj, theta_star, task.query)
        predictions = np.argmax(scores, axis=1)
        local_labels = task.query.local_labels()
        for local, global_id in enumerate(task.class_ids):
            mask = local_labels == local
            correct[global_id] = correct.get(global_id, 0) + int(
                np.sum(predictions[mask] == local)
            )
            total[global_id] = total.get(global_id, 0) + int(np.sum(mask))
    per_class = {c: correct[c] / total[c] for c in sorted(total)}
    accuracies = sorted(per_class.values())
    return EvalSummary(
        overall_accuracy=sum(correct.values()) / sum(total.values()),
        per_class_accuracy=per_class,
        min_class_accuracy=accuracies[0],
        worst3_mean_accuracy=float(np.mean(accuracies[: min(3, len(accuracies))])),
        task_count=len(tasks),
    )
