"""Noise schedules, denoisers, guidance, DDIM sampling, training steps."""

import math

import numpy as np
import pytest

from tricodec import diffusion as dif
from tricodec import rng as rng_mod
from tricodec.diffusion import (
    Embedding,
    GuidanceConfig,
    NoiseSchedule,
    PriorNet,
    TriplaneUNet,
    cfg_combine,
    ddim_loop,
    ddim_sample_prior,
    ddim_timesteps,
    forward_diffuse,
    linear_schedule,
    timestep_features,
    train_step_prior,
    train_step_triplane,
)
from tricodec.encoder import TriplaneSet
from tricodec.errors import ShapeError
from tricodec.tensor import nn
from tricodec.tensor.core import Tensor

rng = np.random.default_rng(31)


# ---------------------------------------------------------------------------
# schedule


def test_linear_schedule_invariants():
    s = linear_schedule(100)
    assert s.num_steps == 100
    assert (s.betas > 0).all() and (s.betas < 1).all()
    assert (np.diff(s.betas) >= 0).all()
    assert (np.diff(s.alphas_cum) < 0).all()
    np.testing.assert_allclose(s.alphas_cum, np.cumprod(1 - s.betas),
                               atol=1e-12)
    assert s.alpha_bar(1) == pytest.approx(1 - s.betas[0], abs=1e-15)


def test_schedule_validation():
    good = np.linspace(1e-4, 0.02, 10)
    with pytest.raises(ShapeError):
        NoiseSchedule(betas=np.array([0.5, 1.5]), alphas_cum=np.array([0.5, 0.2]))
    with pytest.raises(ShapeError):
        NoiseSchedule(betas=good[::-1].copy(), alphas_cum=np.cumprod(1 - good))
    with pytest.raises(ShapeError):
        NoiseSchedule(betas=good, alphas_cum=np.cumprod(1 - good)[:5])
    with pytest.raises(ShapeError):
        NoiseSchedule(betas=good, alphas_cum=np.sort(np.cumprod(1 - good)))


def test_alpha_bar_range_checks():
    s = linear_schedule(50)
    with pytest.raises(ShapeError):
        s.alpha_bar(0)
    with pytest.raises(ShapeError):
        s.alpha_bar(51)
    assert s.alpha_bar(np.array([1, 50])).shape == (2,)


# ---------------------------------------------------------------------------
# forward corruption


def test_forward_diffuse_reconstructs_from_returned_noise():
    s = linear_schedule(100)
    x0 = rng.normal(size=(4, 3))
    for t in (1, 37, 100):
        x_t, eps = forward_diffuse(Tensor(x0), t, rng_mod.stream(t, "fd"), s)
        ab = s.alpha_bar(t)
        np.testing.assert_allclose(
            x_t.data, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, atol=1e-14)


def test_forward_diffuse_timestep_bounds():
    s = linear_schedule(10)
    for bad in (0, 11, -3):
        with pytest.raises(ShapeError):
            forward_diffuse(Tensor(np.zeros(3)), bad, rng_mod.stream(0, "fd"), s)


def test_forward_diffuse_statistics():
    s = linear_schedule(200)
    t = 150
    ab = s.alpha_bar(t)
    c = 2.0
    x0 = Tensor(np.full(20000, c))
    x_t, _ = forward_diffuse(x0, t, rng_mod.stream(1, "fd"), s)
    assert x_t.data.mean() == pytest.approx(np.sqrt(ab) * c, abs=0.05)
    assert x_t.data.std() == pytest.approx(np.sqrt(1 - ab), rel=0.05)


def test_forward_diffuse_gradient_is_signal_scale():
    s = linear_schedule(100)
    x0 = Tensor(rng.normal(size=5), requires_grad=True)
    x_t, _ = forward_diffuse(x0, 60, rng_mod.stream(2, "fd"), s)
    x_t.sum().backward()
    np.testing.assert_allclose(x0.grad, np.sqrt(s.alpha_bar(60)), atol=1e-14)


# ---------------------------------------------------------------------------
# embeddings and timestep features


def test_embedding_kind_scaling():
    v = rng.normal(size=8)
    np.testing.assert_allclose(Embedding(v, "shape").scaled(),
                               v * dif.SHAPE_EMBED_SCALE, atol=0)
    np.testing.assert_allclose(Embedding(v, "image").scaled(),
                               v * dif.IMAGE_EMBED_SCALE, atol=0)
    with pytest.raises(ShapeError):
        Embedding(v, "text")
    with pytest.raises(ShapeError):
        Embedding(np.array([1.0, np.nan]), "shape")


def test_timestep_features_shape_and_bounds():
    f = timestep_features([1, 500, 1000], 16)
    assert f.shape == (3, 16)
    assert np.abs(f).max() <= 1.0
    odd = timestep_features(7, 9)
    assert odd.shape == (1, 9)
    assert odd[0, -1] == 0.0  # zero pad for the odd column
    np.testing.assert_allclose(timestep_features(7, 16),
                               timestep_features(7, 16), atol=0)
    assert np.abs(timestep_features(7, 16) - timestep_features(8, 16)).max() > 0


# ---------------------------------------------------------------------------
# prior network


def test_prior_is_identity_at_init():
    net = PriorNet(dim=8, width=16, blocks=2, seed=3)
    x = rng.normal(size=8)
    out = net(Tensor(x), 5, Tensor(rng.normal(size=8)))
    np.testing.assert_allclose(out.data, x, atol=0)


def test_prior_batched_matches_single_rows():
    net = PriorNet(dim=8, width=16, blocks=2, seed=4)
    for p in net.parameters():
        p.data += 0.05 * rng.standard_normal(p.shape)
    xs = rng.normal(size=(3, 8))
    cond = rng.normal(size=8)
    batched = net(Tensor(xs), 7, Tensor(cond)).data
    for i in range(3):
        row = net(Tensor(xs[i]), 7, Tensor(cond)).data
        np.testing.assert_allclose(batched[i], row, atol=1e-12)


def test_prior_rejects_bad_dims():
    net = PriorNet(dim=8, width=16, blocks=2)
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros(9)), 1, Tensor(np.zeros(8)))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros(8)), 1, Tensor(np.zeros(5)))
    with pytest.raises(ShapeError):
        PriorNet(dim=8, width=16, blocks=3)


def test_prior_seed_determinism():
    a = PriorNet(dim=8, width=16, blocks=2, seed=9)
    b = PriorNet(dim=8, width=16, blocks=2, seed=9)
    x, e = rng.normal(size=8), rng.normal(size=8)
    np.testing.assert_allclose(a(Tensor(x), 3, Tensor(e)).data,
                               b(Tensor(x), 3, Tensor(e)).data, atol=0)


def test_prior_overfits_small_set():
    lrng = np.random.default_rng(123)
    net = PriorNet(dim=8, width=32, blocks=2, seed=5)
    opt = nn.AdamW(net.parameters(), lr=3e-3)
    sched = linear_schedule(100)
    pairs = [(lrng.normal(size=8), lrng.normal(size=8)) for _ in range(4)]
    g = rng_mod.stream(6, "prior-train")
    losses = [train_step_prior(pairs, net, opt, sched, g) for _ in range(400)]
    first, last = np.mean(losses[:10]), np.mean(losses[-10:])
    assert last < 0.3 * first


def test_train_step_prior_rejects_empty_batch():
    net = PriorNet(dim=8, width=16, blocks=2)
    opt = nn.AdamW(net.parameters(), lr=1e-3)
    with pytest.raises(ShapeError):
        train_step_prior([], net, opt, linear_schedule(10), rng_mod.stream(0, "x"))


# ---------------------------------------------------------------------------
# triplane denoiser


def _unet(res=4, **kw):
    args = dict(latent_channels=2, latent_res=res, width=8, levels=1,
                embed_dim=8, seed=7)
    args.update(kw)
    return TriplaneUNet(**args)


def _latent(res=4, c=2):
    return TriplaneSet(Tensor(rng.normal(size=(3, c, res, res))))


def test_unet_output_shape_and_zero_init():
    net = _unet()
    z = _latent()
    out = net(z, 11, np.zeros(8), np.zeros(8))
    assert out.stack.shape == (3, 2, 4, 4)
    np.testing.assert_allclose(out.stack.data, 0.0, atol=0)


def test_unet_rejects_wrong_latent_shape():
    net = _unet()
    with pytest.raises(ShapeError):
        net(_latent(res=8), 1, np.zeros(8), np.zeros(8))


def test_unet_handles_odd_resolutions():
    net = _unet(res=5)
    out = net(_latent(res=5), 3, np.zeros(8), np.zeros(8))
    assert out.stack.shape == (3, 2, 5, 5)


def test_unet_conditioning_changes_output():
    net = _unet()
    for p in net.parameters():
        p.data += 0.1 * rng.standard_normal(p.shape)
    z = _latent()
    e_p = rng.normal(size=8)
    a = net(z, 5, rng.normal(size=8), e_p).stack.data
    b = net(z, 5, rng.normal(size=8), e_p).stack.data
    assert np.abs(a - b).max() > 1e-8


def test_condition_dropout_branches():
    net = _unet()
    e_s, e_p = rng.normal(size=8), rng.normal(size=8)
    cs, cp = dif._dropout_conditions(e_s, e_p, net, u=0.02)
    assert cp is net.null_image
    np.testing.assert_allclose(cs.data, e_s, atol=0)
    cs, cp = dif._dropout_conditions(e_s, e_p, net, u=0.07)
    assert cs is net.null_shape
    np.testing.assert_allclose(cp.data, e_p, atol=0)
    cs, cp = dif._dropout_conditions(e_s, e_p, net, u=0.12)
    assert cs is net.null_shape and cp is net.null_image
    cs, cp = dif._dropout_conditions(e_s, e_p, net, u=0.5)
    np.testing.assert_allclose(cs.data, e_s, atol=0)
    np.testing.assert_allclose(cp.data, e_p, atol=0)


def test_full_dropout_trains_null_embeddings(monkeypatch):
    monkeypatch.setattr(dif, "DROPOUT_IMAGE_ONLY", 0.0)
    monkeypatch.setattr(dif, "DROPOUT_SHAPE_ONLY", 0.0)
    monkeypatch.setattr(dif, "DROPOUT_BOTH", 1.0)
    net = _unet()
    opt = nn.AdamW(net.parameters(), lr=1e-3)
    before = net.null_shape.data.copy()
    batch = [(_latent(), rng.normal(size=8), rng.normal(size=8))]
    for _ in range(3):
        train_step_triplane(batch, net, opt, linear_schedule(20),
                            rng_mod.stream(8, "tri"))
    assert np.abs(net.null_shape.data - before).max() > 0  # nulls received grad


def test_train_step_triplane_learns_single_latent():
    lrng = np.random.default_rng(123)
    net = _unet()
    opt = nn.AdamW(net.parameters(), lr=1e-2)
    sched = linear_schedule(50)
    z = TriplaneSet(Tensor(lrng.normal(size=(3, 2, 4, 4))))
    # repeat the item so each step averages several corruption draws
    batch = [(z, lrng.normal(size=8), lrng.normal(size=8))] * 4
    g = rng_mod.stream(9, "tri-train")
    losses = [train_step_triplane(batch, net, opt, sched, g) for _ in range(200)]
    assert np.mean(losses[-10:]) < 0.75 * np.mean(losses[:10])


def test_train_step_triplane_rejects_empty_batch():
    net = _unet()
    opt = nn.AdamW(net.parameters(), lr=1e-3)
    with pytest.raises(ShapeError):
        train_step_triplane([], net, opt, linear_schedule(10),
                            rng_mod.stream(0, "x"))


# ---------------------------------------------------------------------------
# guidance


def _preds(shape=(4,)):
    return {"uncond": rng.normal(size=shape), "img_only": rng.normal(size=shape),
            "full": rng.normal(size=shape)}


def test_cfg_both_scales_one_returns_full_exactly():
    p = _preds()
    out = cfg_combine(p, GuidanceConfig(s_s=1.0, s_p=1.0))
    assert (out.data == p["full"]).all()


def test_cfg_both_scales_zero_returns_uncond():
    p = _preds()
    out = cfg_combine(p, GuidanceConfig(s_s=0.0, s_p=0.0))
    np.testing.assert_allclose(out.data, p["uncond"], atol=0)


def test_cfg_formula_oracle():
    p = _preds((3, 2))
    s_s, s_p = 2.5, 0.5
    out = cfg_combine(p, GuidanceConfig(s_s=s_s, s_p=s_p))
    want = (p["uncond"] + s_p * (p["img_only"] - p["uncond"])
            + s_s * (p["full"] - p["img_only"]))
    np.testing.assert_allclose(out.data, want, atol=1e-15)


def test_cfg_preserves_triplane_container():
    p = {k: TriplaneSet(Tensor(v)) for k, v in
         _preds((3, 2, 4, 4)).items()}
    out = cfg_combine(p, GuidanceConfig(s_s=3.0, s_p=0.7))
    assert isinstance(out, TriplaneSet)
    want = (p["uncond"].stack.data
            + 0.7 * (p["img_only"].stack.data - p["uncond"].stack.data)
            + 3.0 * (p["full"].stack.data - p["img_only"].stack.data))
    np.testing.assert_allclose(out.stack.data, want, atol=1e-15)


# ---------------------------------------------------------------------------
# DDIM


def test_ddim_timesteps_spacing():
    taus = ddim_timesteps(1000, 50)
    assert taus[0] == 1 and taus[-1] == 1000
    assert (np.diff(taus) > 0).all()
    assert taus.size <= 50
    np.testing.assert_array_equal(ddim_timesteps(10, 10), np.arange(1, 11))
    np.testing.assert_array_equal(ddim_timesteps(1000, 1), [1000])
    with pytest.raises(ShapeError):
        ddim_timesteps(10, 11)
    with pytest.raises(ShapeError):
        ddim_timesteps(10, 0)


def test_ddim_consistent_denoiser_recovers_target_exactly():
    # a denoiser that reports the true eps for a fixed x0 makes DDIM land on
    # that x0 regardless of the step count
    sched = linear_schedule(1000)
    x_star = rng.normal(size=(6,))

    def denoise(x, t):
        ab = sched.alpha_bar(t)
        return (x - math.sqrt(ab) * x_star) / math.sqrt(1 - ab)

    for steps in (1, 7, 50, 1000):
        out = ddim_loop(denoise, (6,), steps, rng_mod.stream(steps, "ddim"),
                        sched, "eps")
        np.testing.assert_allclose(out, x_star, atol=1e-9)


def test_ddim_constant_x0_predictor_returns_constant():
    sched = linear_schedule(100)
    c = np.full(4, 1.7)
    out = ddim_loop(lambda x, t: c, (4,), 10, rng_mod.stream(0, "ddim"),
                    sched, "x0")
    np.testing.assert_allclose(out, c, atol=1e-12)


def test_ddim_zero_eps_rescales_initial_noise():
    sched = linear_schedule(100)
    steps = 9
    out = ddim_loop(lambda x, t: np.zeros_like(x), (5,), steps,
                    rng_mod.stream(3, "ddim"), sched, "eps")
    noise = rng_mod.stream(3, "ddim").standard_normal(5)
    taus = ddim_timesteps(100, steps)
    np.testing.assert_allclose(out, noise / np.sqrt(sched.alpha_bar(taus[-1])),
                               atol=1e-12)


def test_ddim_deterministic_given_stream():
    sched = linear_schedule(50)
    f = lambda x, t: 0.3 * x
    a = ddim_loop(f, (4,), 5, rng_mod.stream(4, "ddim"), sched, "x0")
    b = ddim_loop(f, (4,), 5, rng_mod.stream(4, "ddim"), sched, "x0")
    np.testing.assert_allclose(a, b, atol=0)


def test_ddim_rejects_unknown_pred_type():
    with pytest.raises(ShapeError):
        ddim_loop(lambda x, t: x, (4,), 5, rng_mod.stream(0, "d"),
                  linear_schedule(10), "velocity")


def test_prior_sampler_shape_and_determinism():
    net = PriorNet(dim=8, width=16, blocks=2, seed=11)
    e_i = rng.normal(size=8)
    a = ddim_sample_prior(net, e_i, 5, rng_mod.stream(5, "ps"),
                          linear_schedule(40))
    b = ddim_sample_prior(net, e_i, 5, rng_mod.stream(5, "ps"),
                          linear_schedule(40))
    assert a.shape == (8,)
    assert np.isfinite(a).all()
    np.testing.assert_allclose(a, b, atol=0)
