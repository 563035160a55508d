"""Config handling, CLI subcommands, output schemas, and reproducibility."""

import numpy as np
import pytest

from metaepisodic.data import read_features, read_labels, read_split
from metaepisodic.harness import runner
from metaepisodic.harness.cli import main
from metaepisodic.harness.config import (
    PAPER_PRESET,
    ConfigError,
    parse_config_text,
    resolve_config,
    echo_lines,
    with_overrides,
)
from metaepisodic.metalearn import MetaParams


REQUIRED = {
    "data_bank": "bank.emb1",
    "data_labels": "bank.labels.csv",
    "data_prototypes": "prototypes.emb1",
}


def test_config_defaults_and_overrides():
    cfg = resolve_config(REQUIRED, {"epochs": "3", "outer_lr": "0.001"})
    assert cfg.epochs == 3
    assert cfg.outer_lr == 0.001
    assert cfg.n_way == 3 and cfg.k_shot == 5 and cfg.q_query == 5
    assert cfg.tasks_per_episode == 20
    assert cfg.eval_tasks == 200


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config_text("epoch_count = 3")
    with pytest.raises(ConfigError, match="unknown keys"):
        resolve_config(REQUIRED, {"bogus": "1"})


def test_config_rejects_missing_required_and_bad_values():
    with pytest.raises(ConfigError, match="missing required"):
        resolve_config({}, {})
    with pytest.raises(ConfigError, match="cannot parse"):
        resolve_config(REQUIRED, {"epochs": "three"})
    with pytest.raises(ConfigError, match="sampler"):
        resolve_config(REQUIRED, {"sampler": "sometimes"})
    with pytest.raises(ConfigError, match="algo"):
        resolve_config(REQUIRED, {"algo": "sgd"})


def test_config_file_text_round_trip():
    cfg = resolve_config(REQUIRED, {"seed": "42", "blend_ratio": "0.25"})
    text = "\n".join(echo_lines(cfg)) + "\n"
    again = resolve_config(parse_config_text(text), {})
    assert again == cfg


def test_config_comments_and_duplicates():
    values = parse_config_text("# comment\nseed = 7  # trailing\n\nepochs = 2")
    assert values == {"seed": "7", "epochs": "2"}
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("seed = 1\nseed = 2")


def test_paper_preset_values():
    cfg = resolve_config(REQUIRED, {}, preset="paper")
    assert cfg.tasks_per_episode == 20
    assert cfg.episodes_per_epoch == 50
    assert cfg.epochs == 100
    assert cfg.outer_lr == pytest.approx(1e-4)
    assert cfg.inner_steps_train == 1 and cfg.inner_steps_test == 1
    assert (cfg.n_way, cfg.k_shot, cfg.q_query) == (3, 5, 5)
    # Flags still override the preset.
    cfg = resolve_config(REQUIRED, {"epochs": "2"}, preset="paper")
    assert cfg.epochs == 2 and cfg.episodes_per_epoch == 50


def _gen(tmp_path, extra=()):
    out = tmp_path / "data"
    code = main(
        [
            "gen-data",
            "--out-dir",
            str(out),
            "--per-class",
            "20",
            "--dim",
            "16",
            "--classes",
            "6",
            "--hard-classes",
            "2",
            "--seed",
            "7",
            *extra,
        ]
    )
    assert code == 0
    return out


def _train_flags(data_dir, out_dir, **kwargs):
    flags = {
        "data_bank": data_dir / "bank.emb1",
        "data_labels": data_dir / "bank.labels.csv",
        "data_prototypes": data_dir / "prototypes.emb1",
        "epochs": 1,
        "episodes_per_epoch": 2,
        "tasks_per_episode": 5,
        "k_shot": 3,
        "q_query": 3,
        "eval_tasks": 20,
        "out_dir": out_dir,
        "adapter_hidden": 8,
    }
    flags.update(kwargs)
    args = []
    for key, value in flags.items():
        args.extend([f"--{key.replace('_', '-')}", str(value)])
    return args


def test_gen_data_writes_four_rereadable_files(tmp_path):
    out = _gen(tmp_path)
    files = ["bank.emb1", "bank.labels.csv", "bank.split.csv", "prototypes.emb1"]
    for name in files:
        assert (out / name).exists()
    features = read_features(out / "bank.emb1")
    labels = read_labels(out / "bank.labels.csv")
    protos = read_features(out / "prototypes.emb1")
    train_idx, test_idx = read_split(out / "bank.split.csv")
    assert features.shape == (120, 16)
    assert labels.shape == (120,)
    assert protos.shape == (6, 16)
    assert len(train_idx) + len(test_idx) == 120


def test_gen_data_is_deterministic_across_runs(tmp_path):
    a = _gen(tmp_path / "a")
    b = _gen(tmp_path / "b")
    for name in ["bank.emb1", "bank.labels.csv", "bank.split.csv", "prototypes.emb1"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_gen_data_rejects_dim_smaller_than_classes(tmp_path, capsys):
    code = main(["gen-data", "--out-dir", str(tmp_path / "x"), "--classes", "40", "--dim", "16"])
    assert code == 1
    assert "anchor orthogonalization impossible" in capsys.readouterr().err


def test_train_writes_outputs_with_config_echo(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "run"
    assert main(["train", *_train_flags(data, out)]) == 0
    metrics = (out / "metrics.csv").read_text()
    lines = metrics.splitlines()
    header_end = next(i for i, l in enumerate(lines) if not l.startswith("#"))
    assert lines[header_end] == "epoch,episode,task,inner_loss,outer_loss,mean_acc"
    assert len(lines) == header_end + 1 + 10  # 1 epoch * 2 episodes * 5 tasks
    assert metrics.endswith("\n")

    summary = (out / "summary.txt").read_text()
    assert "overall_accuracy = " in summary
    assert "min_class_accuracy = " in summary
    assert "worst3_mean_accuracy = " in summary
    assert "alpha_length = 1" in summary
    min_line = next(
        l for l in summary.splitlines() if l.startswith("min_class_accuracy")
    )
    value = float(min_line.split("=")[1])
    assert 0.0 <= value <= 1.0
    assert (out / "params.mpar").exists()
    assert (out / "config.resolved").exists()


def test_train_with_zero_epochs_writes_summary_and_no_rows(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "run0"
    assert main(["train", *_train_flags(data, out, epochs=0)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    data_rows = [l for l in lines if l and not l.startswith("#")]
    assert data_rows == ["epoch,episode,task,inner_loss,outer_loss,mean_acc"]
    assert "overall_accuracy = " in (out / "summary.txt").read_text()


def test_train_is_byte_identical_for_fixed_config_and_seed(tmp_path):
    data = _gen(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", *_train_flags(data, out_a, seed=5)]) == 0
    assert main(["train", *_train_flags(data, out_b, seed=5)]) == 0
    a = (out_a / "metrics.csv").read_text()
    b = (out_b / "metrics.csv").read_text()
    # Outputs differ only in the echoed out_dir line.
    strip = lambda text: [l for l in text.splitlines() if not l.startswith("# out_dir")]
    assert strip(a) == strip(b)
    assert (out_a / "params.mpar").read_bytes() == (out_b / "params.mpar").read_bytes()


def test_echoed_config_block_reproduces_identical_outputs(tmp_path):
    data = _gen(tmp_path)
    out_a = tmp_path / "a"
    assert main(["train", *_train_flags(data, out_a, seed=3)]) == 0
    # Extract the echoed block from the metrics header and re-run from it.
    echoed = [
        line[2:]
        for line in (out_a / "metrics.csv").read_text().splitlines()
        if line.startswith("# ")
    ]
    config_file = tmp_path / "replay.cfg"
    config_file.write_text("\n".join(echoed) + "\n")
    out_b = tmp_path / "b"
    assert main(["train", "--config", str(config_file), "--out-dir", str(out_b)]) == 0
    strip = lambda text: [l for l in text.splitlines() if not l.startswith("# out_dir")]
    assert strip((out_a / "metrics.csv").read_text()) == strip(
        (out_b / "metrics.csv").read_text()
    )
    assert (out_a / "params.mpar").read_bytes() == (out_b / "params.mpar").read_bytes()


def test_missing_split_file_is_a_clear_error(tmp_path, capsys):
    data = _gen(tmp_path)
    (data / "bank.split.csv").unlink()
    assert main(["train", *_train_flags(data, tmp_path / "r")]) == 1
    assert "split file" in capsys.readouterr().err


def test_params_snapshot_round_trip(tmp_path):
    theta = np.linspace(-1.0, 1.0, 7)
    params = MetaParams(theta, np.array([0.25]))
    path = tmp_path / "p.mpar"
    runner.write_params(path, params)
    again = runner.read_params(path, theta_length=7)
    assert np.array_equal(again.theta, theta)
    assert np.array_equal(again.alpha, [0.25])

    vector = MetaParams(theta, np.abs(theta))
    runner.write_params(path, vector)
    again = runner.read_params(path, theta_length=7)
    assert again.alpha.shape == (7,)

    path.write_bytes(b"XPAR" + b"\x00" * 8)
    with pytest.raises(ConfigError, match="magic"):
        runner.read_params(path, theta_length=7)
    runner.write_params(path, params)
    with pytest.raises(ConfigError, match="expected theta length"):
        runner.read_params(path, theta_length=5)


def test_eval_command_writes_report(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "run"
    assert main(["train", *_train_flags(data, out)]) == 0
    out_eval = tmp_path / "ev"
    assert (
        main(
            [
                "eval",
                *_train_flags(data, out_eval),
                "--params",
                str(out / "params.mpar"),
            ]
        )
        == 0
    )
    report = (out_eval / "eval.txt").read_text()
    assert "overall_accuracy = " in report
    assert "class_accuracy_0 = " in report


def test_evaluation_fixture_is_shared_across_configurations(tmp_path):
    data = _gen(tmp_path)
    base = resolve_config(
        {
            "data_bank": str(data / "bank.emb1"),
            "data_labels": str(data / "bank.labels.csv"),
            "data_prototypes": str(data / "prototypes.emb1"),
            "k_shot": "3",
            "q_query": "3",
            "eval_tasks": "25",
        }
    )
    dataset = runner.load_dataset(base)
    variant = with_overrides(base, algo="reptile", sampler="random", seed=99)
    tasks_a = runner.evaluation_tasks(base, dataset)
    tasks_b = runner.evaluation_tasks(variant, dataset)
    for a, b in zip(tasks_a, tasks_b):
        assert a.class_ids == b.class_ids
        assert np.array_equal(a.support.embeddings, b.support.embeddings)
        assert np.array_equal(a.query.embeddings, b.query.embeddings)


def test_compare_lists_every_cell_once_and_matches_train(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "cmp"
    args = _train_flags(data, out, seed=2)
    assert main(["compare", *args, "--algos", "maml", "--samplers", "dynamic"]) == 0
    report = (out / "compare.csv").read_text().splitlines()
    rows = [l for l in report if l and not l.startswith("#")]
    assert rows[0] == "algo,sampler,seed,overall_acc,min_class_acc"
    assert len(rows) == 3  # one cell plus its mean row
    cell = rows[1].split(",")
    mean = rows[2].split(",")
    assert cell[:3] == ["maml", "dynamic", "2"]
    assert mean[:3] == ["maml", "dynamic", "mean"]
    assert cell[3:] == mean[3:]

    # The single cell reduces to the train summary for the same config.
    out_t = tmp_path / "single"
    assert main(["train", *_train_flags(data, out_t, seed=2)]) == 0
    summary = (out_t / "summary.txt").read_text()
    overall = next(
        l.split(" = ")[1] for l in summary.splitlines() if l.startswith("overall_accuracy")
    )
    min_class = next(
        l.split(" = ")[1]
        for l in summary.splitlines()
        if l.startswith("min_class_accuracy")
    )
    assert cell[3] == overall
    assert cell[4] == min_class


def test_compare_grid_has_every_pair_exactly_once(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "grid"
    args = _train_flags(data, out, epochs=1, tasks_per_episode=3, eval_tasks=10)
    assert (
        main(
            [
                "compare",
                *args,
                "--algos",
                "maml,reptile",
                "--samplers",
                "dynamic,random",
                "--seeds",
                "0,1",
            ]
        )
        == 0
    )
    rows = [
        l
        for l in (out / "compare.csv").read_text().splitlines()
        if l and not l.startswith("#") and not l.startswith("algo,")
    ]
    cells = [tuple(r.split(",")[:3]) for r in rows if r.split(",")[2] != "mean"]
    assert len(cells) == 8
    assert len(set(cells)) == 8
    means = [r for r in rows if r.split(",")[2] == "mean"]
    assert len(means) == 4


def test_sweep_steps_single_and_zero_rate(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "run"
    # epochs=0 with a zero initial rate: adaptation must be a no-op.
    assert main(["train", *_train_flags(data, out, epochs=0, init_inner_lr=0.0)]) == 0
    out_sweep = tmp_path / "sw"
    assert (
        main(
            [
                "sweep-steps",
                *_train_flags(data, out_sweep, epochs=0, init_inner_lr=0.0),
                "--params",
                str(out / "params.mpar"),
                "--steps",
                "1",
            ]
        )
        == 0
    )
    rows = [
        l
        for l in (out_sweep / "sweep.csv").read_text().splitlines()
        if l and not l.startswith("#")
    ]
    assert rows[0] == "steps,mean_acc,min_class_acc"
    assert len(rows) == 2

    out_sweep5 = tmp_path / "sw5"
    assert (
        main(
            [
                "sweep-steps",
                *_train_flags(data, out_sweep5, epochs=0, init_inner_lr=0.0),
                "--params",
                str(out / "params.mpar"),
            ]
        )
        == 0
    )
    rows = [
        l
        for l in (out_sweep5 / "sweep.csv").read_text().splitlines()
        if l and not l.startswith("#") and not l.startswith("steps,")
    ]
    assert len(rows) == 5
    accs = {tuple(r.split(",")[1:]) for r in rows}
    assert len(accs) == 1  # zero rate: every step count scores identically


def test_cli_exit_status_nonzero_on_error(tmp_path, capsys):
    assert main(["train", "--data-bank", "missing.emb1", "--data-labels", "x", "--data-prototypes", "y"]) == 1
    assert "error:" in capsys.readouterr().err


def test_sweep_rejects_bad_step_list(tmp_path, capsys):
    data = _gen(tmp_path)
    out = tmp_path / "run"
    assert main(["train", *_train_flags(data, out)]) == 0
    code = main(
        [
            "sweep-steps",
            *_train_flags(data, tmp_path / "s"),
            "--params",
            str(out / "params.mpar"),
            "--steps",
            "0,-1",
        ]
    )
    assert code == 1
    assert "positive integers" in capsys.readouterr().err


def test_split_path_convention():
    from pathlib import Path

    assert runner.derive_split_path("out/bank.emb1") == Path("out/bank.split.csv")
    assert runner.derive_split_path("feats.bin") == Path("feats.bin.split.csv")


def test_every_output_file_carries_the_config_echo(tmp_path):
    data = _gen(tmp_path)
    out = tmp_path / "run"
    assert main(["train", *_train_flags(data, out)]) == 0
    out_cmp = tmp_path / "cmp"
    assert main(["compare", *_train_flags(data, out_cmp)]) == 0
    out_sw = tmp_path / "sw"
    assert (
        main(
            [
                "sweep-steps",
                *_train_flags(data, out_sw),
                "--params",
                str(out / "params.mpar"),
                "--steps",
                "1",
            ]
        )
        == 0
    )
    out_ev = tmp_path / "ev"
    assert main(["eval", *_train_flags(data, out_ev), "--params", str(out / "params.mpar")]) == 0

    outputs = [
        out / "metrics.csv",
        out / "summary.txt",
        out_cmp / "compare.csv",
        out_sw / "sweep.csv",
        out_ev / "eval.txt",
    ]
    for path in outputs:
        text = path.read_text()
        assert text.endswith("\n"), path
        echoed = [l for l in text.splitlines() if l.startswith("# ")]
        assert any(l.startswith("# algo = ") for l in echoed), path
        assert any(l.startswith("# eval_seed = ") for l in echoed), path
