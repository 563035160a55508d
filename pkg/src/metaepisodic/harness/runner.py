"""Seeded experiment orchestration and report writing.

All text outputs start with the resolved configuration echoed as ``# ``
comment lines, use 6-significant-digit decimals, and end with a trailing
newline. Parameter snapshots are binary: magic ``MPAR``, u32 value count,
then float64 little-endian values, adapter parameters first and the inner
rate(s) appended last.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import data as databank
from ..episodic import EpisodePlan, Task, TaskShape
from ..metalearn import (
    EvalSummary,
    MetaParams,
    MetricsLog,
    TrainConfig,
    evaluate_fixture,
    sample_eval_tasks,
    train,
)
from ..model import AdapterObjective, ClassPrototypes, param_length
from .config import ConfigError, ExperimentConfig, echo_lines, with_overrides

__all__ = [
    "Dataset",
    "RunOutput",
    "fmt",
    "derive_split_path",
    "load_dataset",
    "build_objective",
    "training_run",
    "write_metrics",
    "write_summary",
    "write_resolved_config",
    "write_params",
    "read_params",
    "run_compare",
    "run_sweep",
]

_MPAR_MAGIC = b"MPAR"
_MPAR_HEADER = struct.Struct("<4sI")


def fmt(value: float) -> str:
    """Decimal formatting used by every report: 6 significant digits."""
    return f"{value:.6g}"


@dataclass(frozen=True)
class Dataset:
    train_bank: databank.EmbeddingBank
    test_bank: databank.EmbeddingBank
    prototypes: ClassPrototypes


@dataclass(frozen=True)
class RunOutput:
    params: MetaParams
    log: MetricsLog
    summary: EvalSummary


def derive_split_path(bank_path) -> Path:
    """Split file convention: ``bank.emb1`` sits next to ``bank.split.csv``."""
    path = Path(bank_path)
    if path.name.endswith(".emb1"):
        return path.with_name(path.name[: -len(".emb1")] + ".split.csv")
    return path.with_name(path.name + ".split.csv")


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    """Read the bank, labels, prototypes, and sibling split file.

    Prototype rows are re-unit-normalized after reading: the file holds
    float32 values, which perturbs norms by about 1e-8.
    """
    bank = databank.read_bank(cfg.data_bank, cfg.data_labels)
    raw = databank.read_features(cfg.data_prototypes)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ConfigError(f"prototype file {cfg.data_prototypes} has a zero row")
    prototypes = ClassPrototypes(raw / norms)
    if bank.dim != prototypes.dim:
        raise ConfigError(
            f"bank dim {bank.dim} does not match prototype dim {prototypes.dim}"
        )
    if bank.class_count > prototypes.count:
        raise ConfigError(
            f"bank has {bank.class_count} classes but only "
            f"{prototypes.count} prototypes"
        )
    bank = databank.EmbeddingBank(
        features=bank.features, labels=bank.labels, class_count=prototypes.count
    )
    split_path = derive_split_path(cfg.data_bank)
    if not split_path.exists():
        raise ConfigError(
            f"split file {split_path} not found next to {cfg.data_bank}; "
            "gen-data writes it, or provide one (text: 'index,subset' header, "
            "then 'row,train|test' lines)"
        )
    train_idx, test_idx = databank.read_split(split_path)
    dataset = Dataset(
        train_bank=databank.subset_bank(bank, train_idx),
        test_bank=databank.subset_bank(bank, test_idx),
        prototypes=prototypes,
    )
    shape = TaskShape(cfg.n_way, cfg.k_shot, cfg.q_query)
    for name, side in (("train", dataset.train_bank), ("test", dataset.test_bank)):
        counts = side.per_class_counts()
        if int(counts.min()) < shape.per_class:
            raise ConfigError(
                f"{name} split: class {int(counts.argmin())} has "
                f"{int(counts.min())} instances, task shape needs {shape.per_class}"
            )
    return dataset


def build_objective(cfg: ExperimentConfig, prototypes: ClassPrototypes) -> AdapterObjective:
    return AdapterObjective(
        prototypes=prototypes,
        dim=prototypes.dim,
        hidden=cfg.adapter_hidden,
        blend=cfg.blend_ratio,
        logit_scale=cfg.logit_scale,
    )


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        episodes_per_epoch=cfg.episodes_per_epoch,
        meta_batch=cfg.meta_batch,
        outer_lr=cfg.outer_lr,
        init_inner_lr=cfg.init_inner_lr,
        inner_steps=cfg.inner_steps_train,
        reptile_rate=cfg.reptile_rate,
        adapter_hidden=cfg.adapter_hidden,
        blend_ratio=cfg.blend_ratio,
        logit_scale=cfg.logit_scale,
    )


def evaluation_tasks(cfg: ExperimentConfig, dataset: Dataset) -> list[Task]:
    """The fixed test-task list shared by every configuration of a study."""
    shape = TaskShape(cfg.n_way, cfg.k_shot, cfg.q_query)
    return sample_eval_tasks(dataset.test_bank, shape, cfg.eval_tasks, cfg.eval_seed)


def training_run(
    cfg: ExperimentConfig,
    dataset: Dataset,
    eval_tasks: list[Task] | None = None,
) -> RunOutput:
    """Train per the config, then evaluate on the fixed test-task fixture."""
    shape = TaskShape(cfg.n_way, cfg.k_shot, cfg.q_query)
    plan = EpisodePlan(
        tasks_per_episode=cfg.tasks_per_episode, sampler=cfg.sampler, seed=cfg.seed
    )
    params, log = train(
        cfg.algo, dataset.train_bank, dataset.prototypes, plan, shape, _train_config(cfg)
    )
    if eval_tasks is None:
        eval_tasks = evaluation_tasks(cfg, dataset)
    obj = build_objective(cfg, dataset.prototypes)
    summary = evaluate_fixture(params, obj, eval_tasks, cfg.inner_steps_test)
    return RunOutput(params=params, log=log, summary=summary)


def _header_block(cfg: ExperimentConfig) -> list[str]:
    return [f"# {line}" for line in echo_lines(cfg)]


def write_resolved_config(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text("\n".join(echo_lines(cfg)) + "\n")


def write_metrics(path, cfg: ExperimentConfig, log: MetricsLog) -> None:
    lines = _header_block(cfg)
    lines.append("epoch,episode,task,inner_loss,outer_loss,mean_acc")
    for r in log.records:
        lines.append(
            f"{r.epoch},{r.episode},{r.task},{fmt(r.inner_loss)},"
            f"{fmt(r.outer_loss)},{fmt(r.mean_query_accuracy)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_summary(path, cfg: ExperimentConfig, out: RunOutput) -> None:
    summary = out.summary
    lines = _header_block(cfg)
    lines.extend(
        [
            f"train_steps = {len(out.log.records)}",
            f"eval_task_count = {summary.task_count}",
            f"overall_accuracy = {fmt(summary.overall_accuracy)}",
            f"min_class_accuracy = {fmt(summary.min_class_accuracy)}",
            f"worst3_mean_accuracy = {fmt(summary.worst3_mean_accuracy)}",
            f"alpha_length = {out.params.alpha.shape[0]}",
            f"alpha_mean = {fmt(float(np.mean(out.params.alpha)))}",
        ]
    )
    for class_id, acc in summary.per_class_accuracy.items():
        lines.append(f"class_accuracy_{class_id} = {fmt(acc)}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_params(path, params: MetaParams) -> None:
    values = np.concatenate([params.theta, params.alpha]).astype("<f8")
    Path(path).write_bytes(_MPAR_HEADER.pack(_MPAR_MAGIC, values.shape[0]) + values.tobytes())


def read_params(path, theta_length: int) -> MetaParams:
    """Load a snapshot; the rate length (1 or theta_length) is inferred."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != _MPAR_MAGIC:
        raise ConfigError(f"bad params magic {blob[:4]!r} at byte offset 0")
    _, count = _MPAR_HEADER.unpack_from(blob)
    expected = _MPAR_HEADER.size + count * 8
    if len(blob) != expected:
        raise ConfigError(
            f"params file holds {len(blob)} bytes, header declares {expected}"
        )
    values = np.frombuffer(blob, dtype="<f8", offset=_MPAR_HEADER.size).astype(np.float64)
    alpha_len = count - theta_length
    if alpha_len not in (1, theta_length):
        raise ConfigError(
            f"params file holds {count} values; expected theta length "
            f"{theta_length} plus rate length 1 or {theta_length}"
        )
    return MetaParams(theta=values[:theta_length], alpha=values[theta_length:])


def expected_theta_length(cfg: ExperimentConfig, prototypes: ClassPrototypes) -> int:
    return param_length(prototypes.dim, cfg.adapter_hidden)


@dataclass(frozen=True)
class CompareCell:
    algo: str
    sampler: str
    seed: int
    overall_accuracy: float
    min_class_accuracy: float


def run_compare(
    cfg: ExperimentConfig,
    algos: list[str],
    samplers: list[str],
    seeds: list[int],
) -> list[CompareCell]:
    """Train every (algo, sampler) per seed on identical data and fixture."""
    dataset = load_dataset(cfg)
    fixture = evaluation_tasks(cfg, dataset)
    cells = []
    for algo in algos:
        for sampler in samplers:
            for seed in seeds:
                cell_cfg = with_overrides(cfg, algo=algo, sampler=sampler, seed=seed)
                out = training_run(cell_cfg, dataset, eval_tasks=fixture)
                cells.append(
                    CompareCell(
                        algo=algo,
                        sampler=sampler,
                        seed=seed,
                        overall_accuracy=out.summary.overall_accuracy,
                        min_class_accuracy=out.summary.min_class_accuracy,
                    )
                )
    return cells


def write_compare_report(path, cfg: ExperimentConfig, cells: list[CompareCell]) -> None:
    lines = _header_block(cfg)
    lines.append("algo,sampler,seed,overall_acc,min_class_acc")
    for cell in cells:
        lines.append(
            f"{cell.algo},{cell.sampler},{cell.seed},"
            f"{fmt(cell.overall_accuracy)},{fmt(cell.min_class_accuracy)}"
        )
    seen = []
    for cell in cells:
        key = (cell.algo, cell.sampler)
        if key not in seen:
            seen.append(key)
    for algo, sampler in seen:
        group = [c for c in cells if (c.algo, c.sampler) == (algo, sampler)]
        lines.append(
            f"{algo},{sampler},mean,"
            f"{fmt(float(np.mean([c.overall_accuracy for c in group])))},"
            f"{fmt(float(np.mean([c.min_class_accuracy for c in group])))}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def run_sweep(
    cfg: ExperimentConfig, params: MetaParams, steps: list[int]
) -> list[tuple[int, float, float]]:
    """Mean and min-class accuracy on the fixed fixture per adaptation depth."""
    dataset = load_dataset(cfg)
    fixture = evaluation_tasks(cfg, dataset)
    obj = build_objective(cfg, dataset.prototypes)
    rows = []
    for n in steps:
        summary = evaluate_fixture(params, obj, fixture, n)
        rows.append((n, summary.overall_accuracy, summary.min_class_accuracy))
    return rows


def write_sweep_report(path, cfg: ExperimentConfig, rows: list[tuple[int, float, float]]) -> None:
    lines = _header_block(cfg)
    lines.append("steps,mean_acc,min_class_acc")
    for n, mean_acc, min_acc in rows:
        lines.append(f"{n},{fmt(mean_acc)},{fmt(min_acc)}")
    Path(path).write_text("\n".join(lines) + "\n")
