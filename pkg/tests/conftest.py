"""Shared fixtures: a tiny config factory and a session-scoped trained run."""

import pytest

from tricodec import pipeline
from tricodec.config import make_config

# Small enough that the full three-stage pipeline trains in seconds.
TINY = dict(
    num_shapes=2, num_points=256,
    volume_res=8, volume_channels=4, latent_res=2, latent_channels=2,
    decoder_res=8, decoder_channels=4, grid_size=8, head_width=8,
    image_size=24, num_views=3, embed_dim=16,
    ae_steps=12, prior_steps=12, tri_steps=12,
    prior_width=16, prior_blocks=2, unet_width=8, unet_levels=1,
    sample_steps=5, anchor_points=64, checkpoint_every=50,
)


def tiny_config(out_dir, **overrides):
    merged = {**TINY, **overrides}
    return make_config("desk", out_dir=str(out_dir), **merged)


@pytest.fixture(scope="session")
def trained_tiny(tmp_path_factory):
    """Config whose out_dir holds a dataset and all three stage checkpoints."""
    root = tmp_path_factory.mktemp("trained")
    cfg = tiny_config(root)
    pipeline.synth_dataset(cfg)
    pipeline.train_autoencoder(cfg)
    pipeline.train_prior(cfg)
    pipeline.train_triplane(cfg)
    return cfg
