"""Run configuration profiles and key=value round trips."""

from pathlib import Path

import pytest

from tricodec.config import (
    RunConfig,
    emit_config,
    load_config,
    make_config,
    parse_config,
    save_config,
)
from tricodec.errors import UsageError


def test_desk_defaults():
    cfg = make_config("desk")
    assert cfg.profile == "desk"
    assert cfg.seed == 0
    assert cfg.num_shapes == 8
    assert cfg.ae_steps == 500
    assert cfg.grid_size == 16
    assert cfg.volume_res == 16
    assert cfg.latent_res == 4 and cfg.latent_channels == 4
    assert cfg.use_attention is True
    assert cfg.latent_scalars() == 3 * 4 * 4 * 4


def test_paper_profile_constants():
    cfg = make_config("paper")
    assert cfg.profile == "paper"
    assert cfg.num_points == 100_000
    assert cfg.volume_res == 128 and cfg.volume_channels == 32
    assert cfg.attn_volume_res == 32
    assert cfg.latent_res == 32 and cfg.latent_channels == 32
    assert cfg.decoder_res == 128 and cfg.decoder_channels == 32
    assert cfg.grid_size == 90
    assert cfg.image_size == 512 and cfg.num_views == 40
    assert cfg.embed_dim == 1280
    assert cfg.lambda_rgb == 10.0 and cfg.lambda_mask == 10.0
    assert cfg.lambda_depth == 0.1 and cfg.lambda_kl == 1e-6
    assert cfg.ae_lr == 3e-5 and cfg.ae_lr_min == 3e-6
    assert cfg.prior_lr == 1e-5 and cfg.tri_lr == 1e-5
    assert cfg.diffusion_steps == 1000 and cfg.sample_steps == 50
    assert cfg.guidance_shape == 1.0 and cfg.guidance_image == 5.0


def test_paper_latent_budget():
    assert make_config("paper").latent_scalars() == 98_304


def test_overrides_apply():
    cfg = make_config("desk", num_shapes=4, grid_size=24, lambda_anchor=10.0)
    assert cfg.num_shapes == 4 and cfg.grid_size == 24
    assert cfg.lambda_anchor == 10.0
    assert cfg.ae_steps == 500  # untouched defaults remain


def test_unknown_profile_rejected():
    with pytest.raises(UsageError):
        make_config("laptop")
    with pytest.raises(UsageError):
        RunConfig(profile="huge")


def test_unknown_override_key_rejected():
    with pytest.raises(TypeError):
        make_config("desk", not_a_field=3)


@pytest.mark.parametrize("profile", ["desk", "paper"])
def test_emit_parse_roundtrip(profile):
    cfg = make_config(profile, seed=9, lambda_kl=3.25e-7, out_dir="/tmp/x")
    assert parse_config(emit_config(cfg)) == cfg


def test_parse_skips_comments_and_blanks():
    cfg = parse_config("# hello\n\nseed=4\n  \nnum_shapes=2\n")
    assert cfg.seed == 4 and cfg.num_shapes == 2


def test_parse_errors():
    with pytest.raises(UsageError, match="unknown key"):
        parse_config("volume=16\n")
    with pytest.raises(UsageError, match="key=value"):
        parse_config("just some words\n")
    with pytest.raises(UsageError, match="true/false"):
        parse_config("use_attention=yes\n")
    with pytest.raises(ValueError):
        parse_config("num_shapes=many\n")


def test_bool_serialization():
    text = emit_config(make_config("desk", use_attention=False))
    assert "use_attention=false" in text
    assert parse_config(text).use_attention is False


def test_save_and_load(tmp_path):
    cfg = make_config("desk", seed=123, fov_y=45.0)
    p = tmp_path / "run.cfg"
    save_config(cfg, p)
    assert load_config(p) == cfg
    with pytest.raises(UsageError):
        load_config(tmp_path / "missing.cfg")


def test_dataset_dir_derivation():
    cfg = make_config("desk", out_dir="/tmp/run7")
    assert cfg.dataset_dir() == Path("/tmp/run7/dataset")
    cfg2 = make_config("desk", out_dir="/tmp/run7", data_dir="/data/shared")
    assert cfg2.dataset_dir() == Path("/data/shared")
