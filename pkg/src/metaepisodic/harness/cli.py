"""Command-line front end.

Subcommands: ``gen-data``, ``train``, ``eval``, ``compare``, ``sweep-steps``.
Experiment flags mirror the config keys with a ``--`` prefix and hyphens;
``--config FILE`` loads a key=value file with flags taking precedence. Any
error prints to stderr and exits with a nonzero status.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .. import data as databank
from ..metalearn import evaluate_fixture
from ..model import zero_shot_class_accuracy
from . import runner
from .config import CONFIG_KEYS, echo_lines, load_config_file, resolve_config
from .runner import fmt

__all__ = ["main", "build_parser"]


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument(
        "--preset", choices=["paper"], help="start from the protocol-scale preset"
    )
    for key in CONFIG_KEYS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, metavar="V")


def _resolved(args: argparse.Namespace):
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: str(getattr(args, k)) for k in CONFIG_KEYS if getattr(args, k) is not None}
    return resolve_config(file_values, overrides, preset=args.preset)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaepisodic",
        description="Meta-episodic few-shot training with performance-memory task sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic bank, labels, prototypes, and split")
    gen.add_argument("--out-dir", required=True)
    gen.add_argument("--classes", type=int, default=10)
    gen.add_argument("--dim", type=int, default=32)
    gen.add_argument("--per-class", type=int, default=40)
    gen.add_argument("--hard-classes", type=int, default=3)
    gen.add_argument("--hard-modes", type=int, default=3)
    gen.add_argument("--hard-spread", type=float, default=0.6)
    gen.add_argument("--easy-spread", type=float, default=0.1)
    gen.add_argument("--separation", type=float, default=1.5)
    gen.add_argument("--test-fraction", type=float, default=0.3)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="run one training configuration")
    _add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a saved parameter snapshot")
    _add_config_flags(ev)
    ev.add_argument("--params", required=True, help="MPAR snapshot from train")
    ev.set_defaults(func=cmd_eval)

    cmp_ = sub.add_parser("compare", help="train a grid of configurations on shared data")
    _add_config_flags(cmp_)
    cmp_.add_argument("--algos", default=None, help="comma-separated algorithm list")
    cmp_.add_argument("--samplers", default=None, help="comma-separated sampler list")
    cmp_.add_argument("--seeds", default=None, help="comma-separated seed list")
    cmp_.set_defaults(func=cmd_compare)

    sw = sub.add_parser("sweep-steps", help="accuracy vs adaptation-step count")
    _add_config_flags(sw)
    sw.add_argument("--params", required=True, help="MPAR snapshot from train")
    sw.add_argument("--steps", default="1,2,3,4,5", help="comma-separated step counts")
    sw.set_defaults(func=cmd_sweep_steps)

    return parser


def cmd_gen_data(args: argparse.Namespace) -> int:
    if not 0 <= args.hard_classes <= args.classes:
        raise ValueError(
            f"hard class count {args.hard_classes} outside 0..{args.classes}"
        )
    easy = args.classes - args.hard_classes
    spec = databank.SyntheticSpec(
        class_count=args.classes,
        dim=args.dim,
        modes_per_class=(args.hard_modes,) * args.hard_classes + (1,) * easy,
        spread_per_class=(args.hard_spread,) * args.hard_classes
        + (args.easy_spread,) * easy,
        separation=args.separation,
        examples_per_class=args.per_class,
        seed=args.seed,
    )
    bank, prototypes = databank.generate(spec)
    train_idx, test_idx = databank.split_indices(bank, args.test_fraction, args.seed)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    databank.write_bank(bank, out / "bank.emb1", out / "bank.labels.csv")
    databank.write_split(out / "bank.split.csv", train_idx, test_idx)
    databank.write_features(out / "prototypes.emb1", prototypes.vectors)

    per_class = zero_shot_class_accuracy(bank.features, bank.labels, prototypes)
    overall = sum(per_class.values()) / len(per_class)
    print(f"wrote bank ({bank.size}x{bank.dim}), labels, split, prototypes to {out}")
    print(f"zero-shot prototype accuracy: overall {fmt(overall)}")
    for class_id, acc in per_class.items():
        print(f"  class {class_id}: {fmt(acc)}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolved(args)
    dataset = runner.load_dataset(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    result = runner.training_run(cfg, dataset)
    runner.write_resolved_config(out / "config.resolved", cfg)
    runner.write_metrics(out / "metrics.csv", cfg, result.log)
    runner.write_summary(out / "summary.txt", cfg, result)
    runner.write_params(out / "params.mpar", result.params)

    s = result.summary
    print(f"trained {cfg.algo}/{cfg.sampler} for {len(result.log.records)} steps")
    print(
        f"eval over {s.task_count} tasks: overall {fmt(s.overall_accuracy)}, "
        f"min-class {fmt(s.min_class_accuracy)}"
    )
    print(f"outputs in {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolved(args)
    dataset = runner.load_dataset(cfg)
    params = runner.read_params(
        args.params, runner.expected_theta_length(cfg, dataset.prototypes)
    )
    fixture = runner.evaluation_tasks(cfg, dataset)
    obj = runner.build_objective(cfg, dataset.prototypes)
    summary = evaluate_fixture(params, obj, fixture, cfg.inner_steps_test)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# {line}" for line in echo_lines(cfg)]
    lines.append(f"eval_task_count = {summary.task_count}")
    lines.append(f"overall_accuracy = {fmt(summary.overall_accuracy)}")
    lines.append(f"min_class_accuracy = {fmt(summary.min_class_accuracy)}")
    lines.append(f"worst3_mean_accuracy = {fmt(summary.worst3_mean_accuracy)}")
    for class_id, acc in summary.per_class_accuracy.items():
        lines.append(f"class_accuracy_{class_id} = {fmt(acc)}")
    (out / "eval.txt").write_text("\n".join(lines) + "\n")
    print(
        f"eval over {summary.task_count} tasks: overall {fmt(summary.overall_accuracy)}, "
        f"min-class {fmt(summary.min_class_accuracy)}"
    )
    return 0


def _int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _resolved(args)
    algos = args.algos.split(",") if args.algos else [cfg.algo]
    samplers = args.samplers.split(",") if args.samplers else [cfg.sampler]
    seeds = _int_list(args.seeds) if args.seeds else [cfg.seed]

    cells = runner.run_compare(cfg, algos, samplers, seeds)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner.write_compare_report(out / "compare.csv", cfg, cells)
    for cell in cells:
        print(
            f"{cell.algo}/{cell.sampler} seed {cell.seed}: "
            f"overall {fmt(cell.overall_accuracy)}, min-class {fmt(cell.min_class_accuracy)}"
        )
    print(f"report in {out / 'compare.csv'}")
    return 0


def cmd_sweep_steps(args: argparse.Namespace) -> int:
    cfg = _resolved(args)
    dataset = runner.load_dataset(cfg)
    params = runner.read_params(
        args.params, runner.expected_theta_length(cfg, dataset.prototypes)
    )
    steps = _int_list(args.steps)
    if not steps or any(n < 1 for n in steps):
        raise ValueError(f"step list must hold positive integers, got {args.steps!r}")
    rows = runner.run_sweep(cfg, params, steps)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runner.write_sweep_report(out / "sweep.csv", cfg, rows)
    for n, mean_acc, min_acc in rows:
        print(f"steps {n}: mean {fmt(mean_acc)}, min-class {fmt(min_acc)}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface any failure as a nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
