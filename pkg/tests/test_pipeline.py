"""End-to-end pipeline tests: dataset synthesis, training stages, generation."""

from pathlib import Path

import numpy as np
import pytest

from tricodec import pipeline, rng as rng_mod
from tricodec.errors import MissingArtifactError, ShapeError, UsageError
from tricodec.pipeline import (
    AE_CKPT,
    MANIFEST_NAME,
    PRIOR_CKPT,
    TRI_CKPT,
    SynthDataset,
    analytic_mesh,
    embedding_bases,
    encode_latents,
    generate,
    image_embedding,
    load_autoencoder,
    load_prior,
    load_triplane,
    mesh_sample_points,
    retrieval_scores,
    shape_embedding,
    synth_dataset,
    turntable_cameras,
)
from tricodec.isosurface import is_watertight
from tricodec.shapes import ShapeSpec, random_spec

from conftest import tiny_config


# ---------------------------------------------------------------------------
# Dataset synthesis


def test_synth_dataset_writes_expected_files(tmp_path):
    cfg = tiny_config(tmp_path)
    root = synth_dataset(cfg)
    for i in range(cfg.num_shapes):
        assert (root / f"points_{i:03d}.ply").is_file()
        assert (root / f"mesh_{i:03d}.ply").is_file()
        assert (root / f"targets_{i:03d}.tckpt").is_file()
    assert (root / "embeddings.tckpt").is_file()
    assert (root / MANIFEST_NAME).is_file()


def test_synth_dataset_is_byte_deterministic(tmp_path):
    cfg_a = tiny_config(tmp_path / "a")
    cfg_b = tiny_config(tmp_path / "b")
    root_a = synth_dataset(cfg_a)
    root_b = synth_dataset(cfg_b)
    names = sorted(p.name for p in root_a.iterdir())
    assert names == sorted(p.name for p in root_b.iterdir())
    for name in names:
        assert (root_a / name).read_bytes() == (root_b / name).read_bytes(), name


def test_first_shape_cloud_lies_on_its_sphere(tmp_path):
    # random_spec cycles primitives by index, so shape 0 is always a sphere.
    cfg = tiny_config(tmp_path)
    ds = SynthDataset.load(synth_dataset(cfg))
    spec = ds.specs[0]
    assert spec.primitive == "sphere"
    radius = spec.sizes[0]
    r = np.linalg.norm(ds.points[0], axis=1)
    assert np.abs(r - radius).max() < 1e-9


def test_synth_dataset_rejects_zero_shapes(tmp_path):
    cfg = tiny_config(tmp_path)
    with pytest.raises(UsageError):
        synth_dataset(cfg, n=0)


def test_dataset_load_roundtrip(tmp_path):
    cfg = tiny_config(tmp_path)
    root = synth_dataset(cfg)
    ds = SynthDataset.load(root)
    assert ds.num_shapes == cfg.num_shapes
    assert ds.num_views == cfg.num_views
    assert len(ds.points) == cfg.num_shapes
    assert ds.points[0].shape == (cfg.num_points, 3)
    assert ds.colors[0].shape == (cfg.num_points, 3)
    assert ds.e_s.shape == (cfg.num_shapes, cfg.embed_dim)
    assert ds.e_i.shape == (cfg.num_shapes, cfg.num_views, cfg.embed_dim)
    assert len(ds.views) == cfg.num_views
    rt = ds.target_view(0, cfg.num_views - 1)
    assert rt.rgb.data.shape == (cfg.image_size, cfg.image_size, 3)
    assert rt.mask.data.shape == (cfg.image_size, cfg.image_size)
    np.testing.assert_array_equal(rt.depth.data, ds.targets[0]["depth"][-1])


def test_dataset_load_missing_manifest(tmp_path):
    with pytest.raises(MissingArtifactError):
        SynthDataset.load(tmp_path)


def test_analytic_mesh_is_watertight_and_colored():
    spec = ShapeSpec(primitive="sphere", sizes=[0.6],
                     color_axis=[0.0, 0.0, 1.0],
                     color_a=[1.0, 0.0, 0.0], color_b=[0.0, 0.0, 1.0])
    mesh = analytic_mesh(spec, 16)
    assert not mesh.is_empty
    assert is_watertight(mesh)
    cols = mesh.vertex_colors.data
    assert cols.shape == (mesh.num_vertices, 3)
    assert cols.min() >= 0.0 and cols.max() <= 1.0


# ---------------------------------------------------------------------------
# Oracle embeddings


def test_shape_embedding_is_deterministic():
    spec = random_spec(3, 11)
    a = shape_embedding(spec, 32)
    b = shape_embedding(spec, 32)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (32,)


def test_embedding_bases_are_fixed_projections():
    d1, v1 = embedding_bases(24)
    d2, v2 = embedding_bases(24)
    np.testing.assert_array_equal(d1, d2)
    np.testing.assert_array_equal(v1, v2)
    assert d1.shape[1] == 24 and v1.shape == (3, 24)


def test_image_embeddings_correlate_with_shape_embeddings():
    # The view term and noise are small perturbations, so every conditioned
    # embedding should stay strongly aligned with its source.
    dim = 64
    g = np.random.default_rng(2024)
    corrs = []
    for i in range(20):
        spec = random_spec(i, 5)
        e_s = shape_embedding(spec, dim)
        for _ in range(5):
            v = g.normal(size=3)
            e_i = image_embedding(e_s, v, dim, noise=g.standard_normal(dim))
            corrs.append(np.corrcoef(e_s, e_i)[0, 1])
    corrs = np.array(corrs)
    assert len(corrs) == 100
    assert corrs.min() > 0.9
    assert corrs.mean() > 0.98


def test_image_embedding_without_noise_is_pure_view_shift():
    e_s = shape_embedding(random_spec(0, 7), 16)
    _, view_proj = embedding_bases(16)
    v = np.array([0.0, 0.0, 2.0])
    got = image_embedding(e_s, v, 16)
    np.testing.assert_allclose(got, e_s + 0.1 * view_proj[2], atol=1e-12)


# ---------------------------------------------------------------------------
# Trained stages (session fixture)


def test_training_artifacts_exist(trained_tiny):
    cfg = trained_tiny
    out = Path(cfg.out_dir)
    for name in (AE_CKPT, PRIOR_CKPT, TRI_CKPT,
                 "curve_ae.csv", "curve_prior.csv", "curve_tri.csv"):
        assert (out / name).is_file(), name
    lines = (out / "curve_ae.csv").read_text().strip().splitlines()
    assert lines[0] == "step,total,rgb,mask,depth,kl,anchor"
    assert len(lines) == 1 + cfg.ae_steps
    lines = (out / "curve_prior.csv").read_text().strip().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 1 + cfg.prior_steps


def test_loaders_reject_wrong_checkpoint_kind(trained_tiny):
    cfg = trained_tiny
    out = Path(cfg.out_dir)
    with pytest.raises(UsageError):
        load_prior(out / AE_CKPT, cfg)
    with pytest.raises(UsageError):
        load_autoencoder(out / TRI_CKPT, cfg)
    with pytest.raises(UsageError):
        load_triplane(out / PRIOR_CKPT, cfg)


def test_load_triplane_returns_latent_stats(trained_tiny):
    cfg = trained_tiny
    unet, mean, std = load_triplane(Path(cfg.out_dir) / TRI_CKPT, cfg)
    assert mean.shape == (cfg.latent_channels,)
    assert std.shape == (cfg.latent_channels,)
    assert (std > 0).all()
    assert unet.null_shape.data.shape == (cfg.embed_dim,)


def test_encode_latents_shape(trained_tiny):
    cfg = trained_tiny
    ae = load_autoencoder(Path(cfg.out_dir) / AE_CKPT, cfg)
    ds = SynthDataset.load(cfg.dataset_dir())
    lat = encode_latents(ae, ds)
    assert lat.shape == (cfg.num_shapes, 3, cfg.latent_channels,
                         cfg.latent_res, cfg.latent_res)
    assert np.isfinite(lat).all()


def test_generate_is_deterministic(trained_tiny):
    cfg = trained_tiny
    a = generate(cfg, shape_index=0, export=False)
    b = generate(cfg, shape_index=0, export=False)
    np.testing.assert_array_equal(a["shape_embedding"], b["shape_embedding"])
    if a["mesh"].is_empty:
        assert b["mesh"].is_empty
    else:
        np.testing.assert_array_equal(a["mesh"].vertices.data,
                                      b["mesh"].vertices.data)
        np.testing.assert_array_equal(a["mesh"].faces, b["mesh"].faces)


def test_generate_exports_mesh_assets(trained_tiny):
    cfg = trained_tiny
    res = generate(cfg, shape_index=1, turntable=2, tag="smoke")
    assert res["paths"]["obj"].is_file()
    assert res["paths"]["ply"].is_file()
    pngs = res["paths"]["png"]
    assert len(pngs) == 2 and all(p.is_file() for p in pngs)
    assert res["paths"]["obj"].name == "smoke.obj"


def test_generate_validates_indices_and_embeddings(trained_tiny):
    cfg = trained_tiny
    with pytest.raises(UsageError):
        generate(cfg, shape_index=99, export=False)
    with pytest.raises(UsageError):
        generate(cfg, shape_index=0, view_index=99, export=False)
    with pytest.raises(ShapeError):
        generate(cfg, embedding=np.zeros(7), export=False)


def test_generate_requires_checkpoints(tmp_path):
    cfg = tiny_config(tmp_path / "fresh")
    with pytest.raises(MissingArtifactError):
        generate(cfg, shape_index=0, export=False)


def test_generate_without_prior_uses_learned_null_token(trained_tiny):
    cfg = trained_tiny
    unet, _, _ = load_triplane(Path(cfg.out_dir) / TRI_CKPT, cfg)
    res = generate(cfg, shape_index=0, use_prior=False, export=False)
    np.testing.assert_array_equal(res["shape_embedding"], unet.null_shape.data)


def test_generate_accepts_raw_embedding(trained_tiny):
    cfg = trained_tiny
    e = np.linspace(-1.0, 1.0, cfg.embed_dim)
    res = generate(cfg, embedding=e, export=False)
    assert res["tag"] == "gen_file"
    np.testing.assert_array_equal(res["image_embedding"], e)


def test_export_reconstruction_writes_assets(trained_tiny):
    cfg = trained_tiny
    res = pipeline.export_reconstruction(cfg, shape_index=0, turntable=2)
    paths = res["paths"]
    assert paths["obj"].is_file() and paths["ply"].is_file()
    assert len(paths["png"]) == 2
    with pytest.raises(UsageError):
        pipeline.export_reconstruction(cfg, shape_index=9)


def test_mesh_sample_points_determinism():
    spec = ShapeSpec(primitive="sphere", sizes=[0.55],
                     color_axis=[0.0, 0.0, 1.0],
                     color_a=[1.0, 1.0, 1.0], color_b=[0.0, 0.0, 0.0])
    mesh = analytic_mesh(spec, 12)
    a = mesh_sample_points(mesh, 64, seed=4)
    b = mesh_sample_points(mesh, 64, seed=4)
    c = mesh_sample_points(mesh, 64, seed=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (64, 3)


def test_retrieval_scores_shape_and_hits(trained_tiny):
    cfg = trained_tiny
    ds = SynthDataset.load(cfg.dataset_dir())
    hits, dists = retrieval_scores(cfg, ds, use_prior=True, sample_count=128)
    assert dists.shape == (cfg.num_shapes, cfg.num_shapes)
    assert 0 <= hits <= cfg.num_shapes
    # rows for non-empty generations are fully finite, empty rows fully inf
    for row in dists:
        assert np.isfinite(row).all() or np.isinf(row).all()


def test_ablate_unknown_axis(trained_tiny):
    with pytest.raises(UsageError):
        pipeline.ablate(trained_tiny, "thickness")


def test_ablate_prior_writes_report(trained_tiny):
    cfg = trained_tiny
    rep = pipeline.ablate(cfg, "prior")
    assert rep["csv"].is_file() and rep["txt"].is_file()
    lines = rep["csv"].read_text().strip().splitlines()
    assert lines[0] == "variant,retrieval,mean_self_chamfer"
    assert len(lines) == 3
    assert lines[1].startswith("with-prior,")
    assert lines[2].startswith("no-prior,")
    assert "with-prior" in rep["table"]


def test_turntable_cameras_ring(trained_tiny):
    cfg = trained_tiny
    cams = turntable_cameras(cfg, count=4)
    assert len(cams) == 4
    for cam in cams:
        assert cam.height == cfg.image_size and cam.width == cfg.image_size
        np.testing.assert_allclose(np.linalg.norm(cam.position),
                                   cfg.camera_radius, rtol=1e-12)
    positions = np.stack([c.position for c in cams])
    assert len(np.unique(positions.round(9), axis=0)) == 4
