"""CLI tests: flag merging, exit codes, and end-to-end subcommands."""

import json
from pathlib import Path

import numpy as np
import pytest

from tricodec import cli, pipeline
from tricodec.cli import OUT_ENV, main
from tricodec.config import emit_config, make_config, parse_config
from tricodec.errors import NumericalError

from conftest import TINY


def tiny_flags(out_dir, **extra):
    merged = {**TINY, **extra, "out_dir": str(out_dir)}
    flags = []
    for key, value in merged.items():
        flags += ["--" + key.replace("_", "-"), str(value)]
    return flags


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv(OUT_ENV, raising=False)


# ---------------------------------------------------------------------------
# Parsing and config merging


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_command_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1


def test_bad_flag_value_is_usage_error(capsys):
    assert main(["synth", "--num-points", "many"]) == 1


def test_emit_config_is_parseable(capsys):
    assert main(["synth", "--emit-config", "--num-points", "123"]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.num_points == 123
    assert cfg.profile == "desk"


def test_env_out_dir_and_flag_precedence(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))
    assert main(["synth", "--emit-config"]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.out_dir == str(tmp_path / "env")

    # an explicit flag wins over the environment
    assert main(["synth", "--emit-config", "--out-dir", str(tmp_path / "flag")]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.out_dir == str(tmp_path / "flag")


def test_config_file_out_dir_beats_env(tmp_path, monkeypatch, capsys):
    file_cfg = make_config("desk", out_dir=str(tmp_path / "file"), num_points=777)
    path = tmp_path / "run.cfg"
    path.write_text(emit_config(file_cfg))
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env"))

    assert main(["synth", "--emit-config", "--config", str(path)]) == 0
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.out_dir == str(tmp_path / "file")
    assert cfg.num_points == 777

    # flags still override the file
    assert main(["synth", "--emit-config", "--config", str(path),
                 "--num-points", "888"]) == 0
    assert parse_config(capsys.readouterr().out).num_points == 888


def test_profile_and_config_conflict(tmp_path, capsys):
    path = tmp_path / "run.cfg"
    path.write_text(emit_config(make_config("desk")))
    assert main(["synth", "--config", str(path), "--profile", "desk"]) == 1
    assert "not both" in capsys.readouterr().err


def test_ablate_requires_axis(tmp_path):
    assert main(["ablate"] + tiny_flags(tmp_path)) == 1


# ---------------------------------------------------------------------------
# Exit codes


def test_missing_artifact_exits_2(tmp_path, capsys):
    assert main(["export"] + tiny_flags(tmp_path / "empty")) == 2
    assert "error:" in capsys.readouterr().err


def test_shape_error_exits_1(trained_tiny, tmp_path, capsys):
    emb = tmp_path / "embed.txt"
    np.savetxt(emb, np.zeros(7))
    code = main(["generate", "--embedding", str(emb)]
                + tiny_flags(trained_tiny.out_dir))
    assert code == 1


def test_missing_embedding_file_exits_1(trained_tiny, tmp_path):
    code = main(["generate", "--embedding", str(tmp_path / "nope.txt")]
                + tiny_flags(trained_tiny.out_dir))
    assert code == 1


def test_numerical_error_exits_3(monkeypatch, capsys):
    def boom(cfg):
        raise NumericalError("synthetic blow-up")

    monkeypatch.setattr(pipeline, "synth_dataset", boom)
    assert main(["synth"]) == 3
    assert "blow-up" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# End-to-end subcommands


def test_synth_cli_with_count_alias(tmp_path, capsys):
    code = main(["synth", "--count", "2"] + tiny_flags(tmp_path))
    assert code == 0
    out = capsys.readouterr().out
    assert "2 shapes" in out
    manifest = json.loads(
        (Path(tmp_path) / "dataset" / "dataset.json").read_text())
    assert manifest["num_shapes"] == 2


def test_train_ae_cli(tmp_path, capsys):
    flags = tiny_flags(tmp_path, ae_steps=4, num_shapes=1)
    assert main(["synth"] + flags) == 0
    assert main(["train-ae"] + flags) == 0
    out = capsys.readouterr().out
    assert "train-ae: 4 steps" in out
    assert "drop=" in out
    assert (tmp_path / "ae.ckpt").is_file()


def test_generate_cli(trained_tiny, capsys):
    flags = tiny_flags(trained_tiny.out_dir)
    code = main(["generate", "--shape", "0", "--no-prior",
                 "--turntable", "1", "--tag", "cli_gen"] + flags)
    assert code == 0
    out = capsys.readouterr().out
    assert "cli_gen:" in out
    assert (Path(trained_tiny.out_dir) / "cli_gen.obj").is_file()
    assert (Path(trained_tiny.out_dir) / "cli_gen_view0.png").is_file()


def test_export_cli(trained_tiny, capsys):
    flags = tiny_flags(trained_tiny.out_dir)
    assert main(["export", "--shape", "1", "--turntable", "1"] + flags) == 0
    assert "recon_001" in capsys.readouterr().out
