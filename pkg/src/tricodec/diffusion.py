"""Latent diffusion: schedules, the embedding prior, the triplane denoiser,
dual classifier-free guidance, and a deterministic DDIM sampler.

Two models live here.  The prior denoises a shape embedding conditioned on an
image embedding and predicts the clean vector directly (x0-prediction, L1).
The triplane model denoises the latent planes conditioned on both embeddings
and predicts the added noise (eps-prediction, L1).  Condition dropout during
triplane training enables the dual guidance combination at sampling time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import rng as rng_mod
from .attention import TriConv
from .encoder import TriplaneSet
from .errors import ShapeError
from .tensor import nn, ops
from .tensor import core
from .tensor.core import Tensor, astensor, no_grad

SHAPE_EMBED_SCALE = 0.25
IMAGE_EMBED_SCALE = 0.85
DROPOUT_IMAGE_ONLY = 0.05
DROPOUT_SHAPE_ONLY = 0.05
DROPOUT_BOTH = 0.05


# ---------------------------------------------------------------------------
# Schedule and the forward process


@dataclass
class NoiseSchedule:
    betas: np.ndarray  # [T]
    alphas_cum: np.ndarray  # [T], cumulative product of (1 - beta)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, np.float64)
        self.alphas_cum = np.asarray(self.alphas_cum, np.float64)
        b = self.betas
        if b.ndim != 1 or b.size < 1:
            raise ShapeError("schedule needs a 1-D beta array")
        if not ((b > 0).all() and (b < 1).all()):
            raise ShapeError("betas must lie strictly inside (0, 1)")
        if (np.diff(b) < 0).any():
            raise ShapeError("betas must be non-decreasing")
        a = self.alphas_cum
        if a.shape != b.shape or not ((a > 0).all() and (a < 1).all()):
            raise ShapeError("alphas_cum must match betas and lie in (0, 1)")
        if (np.diff(a) >= 0).any():
            raise ShapeError("alphas_cum must be strictly decreasing")

    @property
    def num_steps(self) -> int:
        return self.betas.size

    def alpha_bar(self, t) -> np.ndarray:
        """Cumulative alpha at one-indexed timestep(s) t."""
        t = np.asarray(t)
        if ((t < 1) | (t > self.num_steps)).any():
            raise ShapeError(f"timestep {t} outside [1, {self.num_steps}]")
        return self.alphas_cum[t - 1]


def linear_schedule(num_steps: int = 1000, beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> NoiseSchedule:
    betas = np.linspace(beta_start, beta_end, num_steps)
    return NoiseSchedule(betas=betas, alphas_cum=np.cumprod(1.0 - betas))


def forward_diffuse(x0, t, rng: np.random.Generator, sched: NoiseSchedule):
    """Corrupt x0 to timestep t; returns (x_t, eps) with eps ~ N(0,1).

    t is a one-indexed scalar; out of range raises.  x_t stays on the graph
    when x0 does.
    """
    if not (1 <= int(t) <= sched.num_steps):
        raise ShapeError(f"timestep {t} outside [1, {sched.num_steps}]")
    x0 = astensor(x0)
    abar = float(sched.alpha_bar(int(t)))
    eps = rng.standard_normal(tuple(x0.shape))
    x_t = x0 * math.sqrt(abar) + Tensor(eps * math.sqrt(1.0 - abar))
    return x_t, eps


# ---------------------------------------------------------------------------
# Embeddings and timestep features


@dataclass
class Embedding:
    vector: np.ndarray
    kind: str  # "shape" | "image"

    def __post_init__(self):
        self.vector = np.asarray(self.vector, np.float64).reshape(-1)
        if not np.isfinite(self.vector).all():
            raise ShapeError("embedding contains non-finite values")
        if self.kind not in ("shape", "image"):
            raise ShapeError(f"unknown embedding kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.vector.size

    def scaled(self) -> np.ndarray:
        s = SHAPE_EMBED_SCALE if self.kind == "shape" else IMAGE_EMBED_SCALE
        return self.vector * s


def timestep_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of one-indexed timesteps; t scalar or [B]."""
    t = np.atleast_1d(np.asarray(t, np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    feat = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if feat.shape[1] < dim:  # odd dim: pad one zero column
        feat = np.concatenate([feat, np.zeros((t.size, 1))], axis=1)
    return feat


class TimestepEmbed(nn.Module):
    """Sinusoidal features pushed through a small MLP."""

    def __init__(self, dim: int, rng):
        self.dim = dim
        self.lin1 = nn.Linear(dim, dim, rng)
        self.lin2 = nn.Linear(dim, dim, rng)

    def forward(self, t) -> Tensor:
        feat = Tensor(timestep_features(t, self.dim))
        return self.lin2(core.silu(self.lin1(feat)))  # [B, dim]


# ---------------------------------------------------------------------------
# Prior model: denoise the shape embedding given an image embedding


class PriorBlock(nn.Module):
    """Residual MLP block; the condition enters by concatenation and the
    timestep by addition before the nonlinearity."""

    def __init__(self, width: int, cond_dim: int, rng):
        self.lin1 = nn.Linear(width + cond_dim, width, rng)
        self.lin2 = nn.Linear(width, width, rng)

    def forward(self, h, cond, t_emb):
        z = self.lin1(core.concat([h, cond], axis=1))
        z = core.silu(z + t_emb)
        return self.lin2(z) + h


class PriorNet(nn.Module):
    """x0-prediction denoiser for shape embeddings.

    Mirrored residual blocks with long skip connections between matching
    depths; a zero-initialized output layer plus a global residual makes the
    whole network the identity on its noisy input at initialization.
    """

    def __init__(self, dim: int = 64, width: int = 128, blocks: int = 4,
                 seed: int = 0):
        if blocks % 2:
            raise ShapeError("prior needs an even number of blocks for mirroring")
        g = rng_mod.stream(seed, "prior-init")
        self.dim = dim
        self.width = width
        self.t_embed = TimestepEmbed(width, g)
        self.in_proj = nn.Linear(dim, width, g)
        self.blocks = [PriorBlock(width, dim, g) for _ in range(blocks)]
        self.out_proj = nn.zero_init(nn.Linear(width, dim, g))

    def forward(self, e_s_t, t, e_i) -> Tensor:
        e_s_t = astensor(e_s_t)
        e_i = astensor(e_i)
        squeeze = e_s_t.ndim == 1
        if squeeze:
            e_s_t = e_s_t.reshape(1, -1)
        if e_i.ndim == 1:
            e_i = core.broadcast_to(e_i.reshape(1, -1), (e_s_t.shape[0], e_i.shape[-1]))
        if e_s_t.shape[-1] != self.dim or e_i.shape[-1] != self.dim:
            raise ShapeError(
                f"embedding dim mismatch: model {self.dim}, got "
                f"{e_s_t.shape[-1]} and {e_i.shape[-1]}")
        t_emb = self.t_embed(t)
        if t_emb.shape[0] == 1 and e_s_t.shape[0] > 1:
            t_emb = core.broadcast_to(t_emb, (e_s_t.shape[0], self.width))
        h = self.in_proj(e_s_t)
        saved = []
        half = len(self.blocks) // 2
        for i, blk in enumerate(self.blocks):
            if i >= half:
                h = h + saved.pop()
            h = blk(h, e_i, t_emb)
            if i < half:
                saved.append(h)
        out = e_s_t + self.out_proj(h)
        return out.reshape(-1) if squeeze else out


def prior_forward(e_s_t, t, e_i, model: PriorNet) -> Tensor:
    return model(e_s_t, t, e_i)


# ---------------------------------------------------------------------------
# Triplane denoiser UNet


class CrossAttend(nn.Module):
    """Per-pixel attention over the two condition tokens, residual output."""

    def __init__(self, channels: int, cond_dim: int, rng):
        self.channels = channels
        self.q_proj = nn.Linear(channels, channels, rng)
        self.k_proj = nn.Linear(cond_dim, channels, rng)
        self.v_proj = nn.Linear(cond_dim, channels, rng)
        self.out_proj = nn.Linear(channels, channels, rng)

    def forward(self, planes: TriplaneSet, e_s, e_p) -> TriplaneSet:
        s = planes.stack  # [3,C,R,R]
        three, c, r, _ = s.shape
        tokens = core.stack([astensor(e_s), astensor(e_p)], axis=0)  # [2,D]
        flat = core.transpose(s, (0, 2, 3, 1)).reshape(-1, c)
        q = self.q_proj(flat)  # [N,C]
        k = self.k_proj(tokens)  # [2,C]
        v = self.v_proj(tokens)
        att = core.softmax((q @ core.transpose(k)) * (1.0 / math.sqrt(c)), axis=-1)
        out = self.out_proj(att @ v).reshape(three, r, r, c)
        return TriplaneSet(s + core.transpose(out, (0, 3, 1, 2)))


class DenoiserResBlock(nn.Module):
    """Two plane-mixing convolutions with GroupNorm/SiLU and a timestep shift."""

    def __init__(self, in_ch: int, out_ch: int, t_dim: int, rng):
        self.norm1 = nn.GroupNorm(in_ch)
        self.conv1 = TriConv(in_ch, out_ch, 3, rng, padding=1)
        self.t_proj = nn.Linear(t_dim, out_ch, rng)
        self.norm2 = nn.GroupNorm(out_ch)
        self.conv2 = TriConv(out_ch, out_ch, 3, rng, padding=1)
        self.skip = None if in_ch == out_ch else TriConv(in_ch, out_ch, 1, rng)

    def forward(self, planes: TriplaneSet, t_emb) -> TriplaneSet:
        x = planes.stack
        h = self.conv1(TriplaneSet(core.silu(self.norm1(x)))).stack
        h = h + self.t_proj(t_emb).reshape(1, -1, 1, 1)
        h = self.conv2(TriplaneSet(core.silu(self.norm2(h)))).stack
        sk = x if self.skip is None else self.skip(TriplaneSet(x)).stack
        return TriplaneSet(h + sk)


class PlaneDown(nn.Module):
    def __init__(self, channels: int, rng):
        self.conv = nn.Conv2d(channels, channels, 3, rng, stride=2, padding=1)

    def forward(self, planes: TriplaneSet) -> TriplaneSet:
        return TriplaneSet(self.conv(planes.stack))


class PlaneUp(nn.Module):
    def __init__(self, channels: int, rng):
        self.conv = nn.Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, planes: TriplaneSet) -> TriplaneSet:
        return TriplaneSet(self.conv(ops.upsample_nearest2d(planes.stack, 2)))


class TriplaneUNet(nn.Module):
    """eps-prediction UNet over latent triplanes with condition cross-attention.

    Owns the learned null embeddings used for condition dropout and for the
    unconditional branches of guided sampling.
    """

    def __init__(self, latent_channels: int = 4, latent_res: int = 4,
                 width: int = 32, levels: int = 2, embed_dim: int = 64,
                 seed: int = 0):
        g = rng_mod.stream(seed, "denoiser-init")
        self.latent_channels = latent_channels
        self.latent_res = latent_res
        self.width = width
        self.levels = levels
        self.embed_dim = embed_dim
        self.t_embed = TimestepEmbed(width, g)
        self.stem = TriConv(latent_channels, width, 3, g, padding=1)
        self.down_blocks = [DenoiserResBlock(width, width, width, g) for _ in range(levels)]
        self.down_attn = [CrossAttend(width, embed_dim, g) for _ in range(levels)]
        self.down_pool = [PlaneDown(width, g) for _ in range(levels)]
        self.mid1 = DenoiserResBlock(width, width, width, g)
        self.mid_attn = CrossAttend(width, embed_dim, g)
        self.mid2 = DenoiserResBlock(width, width, width, g)
        self.up_pool = [PlaneUp(width, g) for _ in range(levels)]
        self.up_blocks = [DenoiserResBlock(2 * width, width, width, g) for _ in range(levels)]
        self.up_attn = [CrossAttend(width, embed_dim, g) for _ in range(levels)]
        self.out_norm = nn.GroupNorm(width)
        self.out_conv = TriConv(width, latent_channels, 1, g)
        nn.zero_init(self.out_conv.conv)
        # learned unconditional stand-ins for dropped conditions
        self.null_shape = Tensor(g.normal(0.0, 0.02, embed_dim), requires_grad=True)
        self.null_image = Tensor(g.normal(0.0, 0.02, embed_dim), requires_grad=True)

    def forward(self, z_t: TriplaneSet, t, e_s, e_p) -> TriplaneSet:
        if tuple(z_t.stack.shape) != (3, self.latent_channels, self.latent_res, self.latent_res):
            raise ShapeError(
                f"latent shape {tuple(z_t.stack.shape)} does not match model "
                f"({self.latent_channels} ch, {self.latent_res} res)")
        t_emb = self.t_embed(t).reshape(-1)
        h = self.stem(z_t)
        skips = []
        for blk, attn, pool in zip(self.down_blocks, self.down_attn, self.down_pool):
            h = blk(h, t_emb)
            h = attn(h, e_s, e_p)
            skips.append(h)
            h = pool(h)
        h = self.mid1(h, t_emb)
        h = self.mid_attn(h, e_s, e_p)
        h = self.mid2(h, t_emb)
        for up, blk, attn in zip(self.up_pool, self.up_blocks, self.up_attn):
            h = up(h)
            sk = skips.pop()
            if h.resolution != sk.resolution:  # odd sizes: doubling overshoots by one
                r = sk.resolution
                h = TriplaneSet(h.stack[:, :, :r, :r])
            h = TriplaneSet(core.concat([h.stack, sk.stack], axis=1))
            h = blk(h, t_emb)
            h = attn(h, e_s, e_p)
        out = self.out_conv(TriplaneSet(core.silu(self.out_norm(h.stack))))
        return out


def triplane_denoiser(z_t: TriplaneSet, t, e_s, e_p, model: TriplaneUNet) -> TriplaneSet:
    return model(z_t, t, e_s, e_p)


# ---------------------------------------------------------------------------
# Guidance and sampling


@dataclass
class GuidanceConfig:
    s_s: float = 1.0  # shape-embedding guidance scale
    s_p: float = 5.0  # image-embedding guidance scale
    null_shape: np.ndarray = dc_field(default_factory=lambda: np.zeros(64))
    null_image: np.ndarray = dc_field(default_factory=lambda: np.zeros(64))


def cfg_combine(preds: dict, cfg: GuidanceConfig):
    """Dual guidance: uncond + s_p*(img_only - uncond) + s_s*(full - img_only)."""
    unc, img, full = preds["uncond"], preds["img_only"], preds["full"]
    as_planes = isinstance(unc, TriplaneSet)
    if as_planes:
        unc, img, full = unc.stack, img.stack, full.stack
    unc, img, full = astensor(unc), astensor(img), astensor(full)
    if cfg.s_p == 1.0 and cfg.s_s == 1.0:
        out = full  # telescoping sum collapses; keep it bit-exact
    else:
        out = unc + cfg.s_p * (img - unc) + cfg.s_s * (full - img)
    return TriplaneSet(out) if as_planes else out


def ddim_timesteps(num_steps: int, steps: int) -> np.ndarray:
    """Evenly spaced one-indexed timesteps, ascending, endpoints included."""
    if steps < 1:
        raise ShapeError("sampler needs steps >= 1")
    if steps > num_steps:
        raise ShapeError(f"sampler steps {steps} exceed schedule length {num_steps}")
    if steps == 1:
        return np.array([num_steps], np.int64)
    return np.unique(np.round(np.linspace(1, num_steps, steps)).astype(np.int64))


def ddim_loop(denoise_fn, shape, steps: int, rng: np.random.Generator,
              sched: NoiseSchedule, pred_type: str = "eps") -> np.ndarray:
    """Deterministic DDIM given initial noise from rng.

    denoise_fn(x_t: np.ndarray, t: int) -> np.ndarray prediction (eps or x0
    per pred_type).  Returns the final clean estimate.
    """
    if pred_type not in ("eps", "x0"):
        raise ShapeError(f"unknown prediction type {pred_type!r}")
    taus = ddim_timesteps(sched.num_steps, steps)
    x = rng.standard_normal(shape)
    for i in range(taus.size - 1, -1, -1):
        t = int(taus[i])
        abar = float(sched.alpha_bar(t))
        pred = denoise_fn(x, t)
        if pred_type == "eps":
            eps = pred
            x0 = (x - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
        else:
            x0 = pred
            eps = (x - math.sqrt(abar) * x0) / math.sqrt(max(1.0 - abar, 1e-12))
        abar_prev = float(sched.alpha_bar(int(taus[i - 1]))) if i > 0 else 1.0
        x = math.sqrt(abar_prev) * x0 + math.sqrt(1.0 - abar_prev) * eps
    return x


def ddim_sample(model, conds: dict, cfg: GuidanceConfig, steps: int,
                rng: np.random.Generator, sched: NoiseSchedule) -> TriplaneSet:
    """Guided triplane sampling; model evaluations run off-graph.

    conds holds raw (unscaled) conditioning vectors under "shape" and "image".
    """
    e_s = np.asarray(conds["shape"], np.float64)
    e_p = np.asarray(conds["image"], np.float64)
    ns = np.asarray(cfg.null_shape, np.float64)
    npi = np.asarray(cfg.null_image, np.float64)
    if ns.shape != e_s.shape or npi.shape != e_p.shape:
        raise ShapeError("null embedding dimensions do not match the conditions")
    shape = (3, model.latent_channels, model.latent_res, model.latent_res)

    def denoise_arr(x, t):
        z = TriplaneSet(Tensor(x))
        with no_grad():
            preds = {
                "uncond": model(z, t, ns, npi).stack.data,
                "img_only": model(z, t, ns, e_p).stack.data,
                "full": model(z, t, e_s, e_p).stack.data,
            }
        return cfg_combine(preds, cfg).data

    return TriplaneSet(Tensor(ddim_loop(denoise_arr, shape, steps, rng, sched, "eps")))


def ddim_sample_prior(model: PriorNet, e_i, steps: int, rng: np.random.Generator,
                      sched: NoiseSchedule) -> np.ndarray:
    """Sample a (scaled-space) shape embedding conditioned on an image one."""
    e_i = np.asarray(e_i, np.float64)

    def denoise(x, t):
        with no_grad():
            return model(Tensor(x), t, Tensor(e_i)).data

    return ddim_loop(denoise, (model.dim,), steps, rng, sched, "x0")


# ---------------------------------------------------------------------------
# Training steps


def _l1(pred: Tensor, target: np.ndarray) -> Tensor:
    return ops.l1_loss(pred, Tensor(np.asarray(target)))


def train_step_prior(batch, model: PriorNet, opt, sched: NoiseSchedule,
                     rng: np.random.Generator) -> float:
    """One L1 x0-prediction update on (shape, image) embedding pairs.

    batch: sequence of (e_s, e_i) raw vectors; they are scaled into diffusion
    space here.  Returns the scalar loss.
    """
    if len(batch) == 0:
        raise ShapeError("empty batch")
    losses = []
    for e_s_raw, e_i_raw in batch:
        e_s = np.asarray(e_s_raw, np.float64) * SHAPE_EMBED_SCALE
        e_i = np.asarray(e_i_raw, np.float64) * IMAGE_EMBED_SCALE
        t = int(rng.integers(1, sched.num_steps + 1))
        x_t, _ = forward_diffuse(Tensor(e_s), t, rng, sched)
        pred = model(x_t, t, Tensor(e_i))
        losses.append(_l1(pred, e_s))
    loss = losses[0]
    for l in losses[1:]:
        loss = loss + l
    loss = loss * (1.0 / len(losses))
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()


def _dropout_conditions(e_s, e_p, model: TriplaneUNet, u: float):
    """5% image-null, 5% shape-null, 5% both-null condition dropout."""
    ns, ni = model.null_shape, model.null_image
    if u < DROPOUT_IMAGE_ONLY:
        return astensor(e_s), ni
    if u < DROPOUT_IMAGE_ONLY + DROPOUT_SHAPE_ONLY:
        return ns, astensor(e_p)
    if u < DROPOUT_IMAGE_ONLY + DROPOUT_SHAPE_ONLY + DROPOUT_BOTH:
        return ns, ni
    return astensor(e_s), astensor(e_p)


def train_step_triplane(batch, model: TriplaneUNet, opt, sched: NoiseSchedule,
                        rng: np.random.Generator) -> float:
    """One L1 eps-prediction update on (latent, e_s, e_p) triples."""
    if len(batch) == 0:
        raise ShapeError("empty batch")
    losses = []
    for latent, e_s, e_p in batch:
        z0 = latent.stack if isinstance(latent, TriplaneSet) else astensor(latent)
        t = int(rng.integers(1, sched.num_steps + 1))
        z_t, eps = forward_diffuse(Tensor(z0.data), t, rng, sched)
        cs, cp = _dropout_conditions(np.asarray(e_s, np.float64),
                                     np.asarray(e_p, np.float64),
                                     model, float(rng.random()))
        pred = model(TriplaneSet(z_t), t, cs, cp)
        losses.append(_l1(pred.stack, eps))
    loss = losses[0]
    for l in losses[1:]:
        loss = loss + l
    loss = loss * (1.0 / len(losses))
    opt.zero_grad()
    loss.backward()
    opt.step()
    return loss.item()
