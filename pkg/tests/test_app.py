"""Command-line surface: parsing, exit codes and the gen-data / plot commands."""

import logging

import pandas as pd
import pytest

from bedpose.app import build_parser, main
from bedpose.data.layout import load_alignment, load_stats
from bedpose.manifest import RunManifest
from bedpose.models import Modality


def _exit_code(argv) -> int:
    with pytest.raises(SystemExit) as info:
        main(argv)
    return info.value.code


def test_global_flags_before_or_after_subcommand():
    parser = build_parser()
    before = parser.parse_args(["--seed", "3", "gen-data"])
    after = parser.parse_args(["gen-data", "--seed", "3"])
    assert before.seed == after.seed == 3
    assert not hasattr(parser.parse_args(["gen-data"]), "seed")


def test_gen_data_needs_seed(tmp_path, caplog):
    with caplog.at_level(logging.ERROR):
        assert _exit_code(["gen-data", "--out", str(tmp_path)]) == 2
    assert "ConfigError" in caplog.text


def test_gen_data(tmp_path):
    out = tmp_path / "data"
    main([
        "gen-data", "--seed", "4", "--out", str(out), "--subjects", "2", "--poses", "1",
        "--scale", "0.25", "--modalities", "lwir,depth", "--covers", "uncover",
    ])
    manifest = RunManifest.load(out)
    assert manifest.command == "gen-data"
    assert manifest.config["modalities"] == ["lwir", "depth"]
    manifest.verify()
    assert set(load_stats(out)) == {Modality.LWIR, Modality.DEPTH}
    assert load_alignment(out).reference is Modality.DEPTH
    assert sorted(p.name for p in out.iterdir() if p.is_dir()) == ["00001", "00002"]


def test_bad_modality_name(tmp_path):
    assert _exit_code(
        ["gen-data", "--seed", "1", "--out", str(tmp_path), "--modalities", "thermal"]
    ) == 2


def test_config_commands_need_config():
    assert _exit_code(["train-unimodal"]) == 2


def test_missing_dataset_root_is_a_data_error(tmp_path):
    config = tmp_path / "exp.yaml"
    config.write_text(
        f"seed: 0\nout: {tmp_path / 'run'}\n"
        f"dataset:\n  root: {tmp_path / 'absent'}\n  modalities: [lwir]\n"
    )
    assert _exit_code(["train-unimodal", "--config", str(config)]) == 3


def test_unknown_config_key(tmp_path):
    config = tmp_path / "exp.yaml"
    config.write_text("seed: 0\ntrain:\n  epoch: 3\n")
    assert _exit_code(["evaluate", "--config", str(config)]) == 2


def test_unknown_subcommand():
    assert _exit_code(["serve"]) == 2


def test_plot(tmp_path):
    losses = tmp_path / "run" / "losses.csv"
    losses.parent.mkdir()
    pd.DataFrame({"epoch": [1, 2, 3], "train_loss": [0.3, 0.2, 0.1]}).to_csv(losses, index=False)
    out = tmp_path / "plots"
    main(["plot", str(losses), "--out", str(out)])
    manifest = RunManifest.load(out)
    assert set(manifest.artifacts) == {"train_loss", "series"}
    assert (out / "train_loss.png").is_file()


def test_plot_of_empty_run_exits_with_data_error(tmp_path):
    empty = tmp_path / "losses.csv"
    empty.write_text("")
    assert _exit_code(["plot", str(empty), "--out", str(tmp_path / "plots")]) == 3
