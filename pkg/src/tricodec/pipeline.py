"""End-to-end pipeline: synthetic data, three training stages, generation.

The flow is dataset -> autoencoder overfit (render loss) -> embedding prior
-> triplane latent denoiser -> guided generation back to a colored mesh.
Every draw of randomness comes from a named stream keyed by the run seed, so
the same config produces byte-identical datasets, checkpoints, and reports.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import rng as rng_mod
from .attention import LatentEnhancer
from .config import RunConfig, emit_config
from .decoder import FlexiField, TriplaneDecoder, grid_vertices
from .diffusion import (
    IMAGE_EMBED_SCALE,
    SHAPE_EMBED_SCALE,
    GuidanceConfig,
    PriorNet,
    TriplaneUNet,
    ddim_sample,
    ddim_sample_prior,
    linear_schedule,
    train_step_prior,
    train_step_triplane,
)
from .encoder import ColoredPointCloud, LatentDistribution, PointCloudEncoder, TriplaneSet
from .errors import MissingArtifactError, NumericalError, ShapeError, UsageError
from .isosurface import SurfaceMesh, extract_mesh, surface_samples
from .meshio import load_ply, save_obj, save_ply, save_png
from .metrics import chamfer_distance
from .render import (
    Camera,
    LossWeights,
    RenderTarget,
    make_view_set,
    project_points,
    rasterize,
    rendering_loss,
)
from .shapes import DESCRIPTOR_DIM, ShapeSpec, random_spec
from .tensor import checkpoint as ckpt
from .tensor import nn
from .tensor.core import Tensor, no_grad, relu

# Fixed basis seed for the oracle embedding projections.  Changing it would
# silently invalidate every stored embedding, so it is a constant, not config.
_BASIS_SEED = 77003917

MANIFEST_NAME = "dataset.json"
EMBEDDINGS_NAME = "embeddings.tckpt"
AE_CKPT = "ae.ckpt"
PRIOR_CKPT = "prior.ckpt"
TRI_CKPT = "tri.ckpt"


# ---------------------------------------------------------------------------
# Oracle embeddings


def embedding_bases(dim: int):
    """Fixed random projections: descriptor->embedding and view->perturbation."""
    g = rng_mod.stream(_BASIS_SEED, "embed-basis")
    desc_proj = g.normal(0.0, 1.0, (DESCRIPTOR_DIM, dim))
    view_proj = g.normal(0.0, 1.0, (3, dim))
    return desc_proj, view_proj


def shape_embedding(spec: ShapeSpec, dim: int) -> np.ndarray:
    """Deterministic embedding of a shape spec: normalized descriptor projected."""
    desc_proj, _ = embedding_bases(dim)
    d = spec.descriptor()
    d = d / np.linalg.norm(d)
    return d @ desc_proj


def image_embedding(e_s: np.ndarray, view_dir, dim: int,
                    noise: np.ndarray | None = None) -> np.ndarray:
    """Shape embedding plus a low-rank view term and optional Gaussian noise."""
    _, view_proj = embedding_bases(dim)
    v = np.asarray(view_dir, np.float64).reshape(3)
    v = v / np.linalg.norm(v)
    out = e_s + 0.1 * (v @ view_proj)
    if noise is not None:
        out = out + 0.05 * np.asarray(noise, np.float64).reshape(dim)
    return out


# ---------------------------------------------------------------------------
# Synthetic dataset


def analytic_mesh(spec: ShapeSpec, grid_size: int) -> SurfaceMesh:
    """Ground-truth colored mesh from the spec's exact SDF (no deformation)."""
    nodes = grid_vertices(grid_size)
    fld = FlexiField(
        sdf=Tensor(spec.sdf(nodes)),
        weight=Tensor(np.ones(len(nodes))),
        deform=Tensor(np.zeros((len(nodes), 3))),
        grid_size=grid_size,
    )
    mesh = extract_mesh(fld)
    if mesh.is_empty:
        return mesh
    return mesh.with_colors(Tensor(spec.colors(mesh.vertices.data)))


def dataset_views(cfg: RunConfig):
    return make_view_set(cfg.num_views, cfg.seed, radius=cfg.camera_radius,
                         fov_y=cfg.fov_y, height=cfg.image_size,
                         width=cfg.image_size, near=cfg.near, far=cfg.far)


def synth_dataset(cfg: RunConfig, n: int | None = None,
                  seed: int | None = None) -> Path:
    """Write n synthetic shapes with clouds, meshes, render targets, embeddings."""
    n = cfg.num_shapes if n is None else int(n)
    seed = cfg.seed if seed is None else int(seed)
    if n < 1:
        raise UsageError("dataset needs at least one shape")
    root = Path(cfg.dataset_dir())
    root.mkdir(parents=True, exist_ok=True)
    views = dataset_views(cfg)
    dim = cfg.embed_dim

    spec_rows = []
    all_e_s = np.zeros((n, dim))
    all_e_i = np.zeros((n, len(views), dim))
    for i in range(n):
        spec = random_spec(i, seed)
        pts = spec.sample_surface(cfg.num_points, rng_mod.substream(seed, "surface-points", i))
        cols = spec.colors(pts)
        save_ply(root / f"points_{i:03d}.ply", pts, colors=cols)

        mesh = analytic_mesh(spec, cfg.grid_size)
        vcols = None if mesh.is_empty else mesh.vertex_colors.data
        save_ply(root / f"mesh_{i:03d}.ply",
                 np.zeros((0, 3)) if mesh.is_empty else mesh.vertices.data,
                 colors=vcols, faces=mesh.faces)

        rgb = np.zeros((len(views), cfg.image_size, cfg.image_size, 3))
        mask = np.zeros((len(views), cfg.image_size, cfg.image_size))
        depth = np.zeros_like(mask)
        with no_grad():
            for v, cam in enumerate(views):
                rt = rasterize(mesh, None if mesh.is_empty else mesh.vertex_colors, cam)
                rgb[v], mask[v], depth[v] = rt.rgb.data, rt.mask.data, rt.depth.data
        ckpt.save(root / f"targets_{i:03d}.tckpt",
                  {"rgb": rgb, "mask": mask, "depth": depth},
                  meta={"shape": i, "num_views": len(views)})

        e_s = shape_embedding(spec, dim)
        noise = rng_mod.substream(seed, "embed-noise", i).standard_normal((len(views), dim))
        for v, cam in enumerate(views):
            all_e_i[i, v] = image_embedding(e_s, cam.position, dim, noise[v])
        all_e_s[i] = e_s
        spec_rows.append({
            "primitive": spec.primitive,
            "sizes": list(spec.sizes),
            "color_axis": spec.color_axis.tolist(),
            "color_a": spec.color_a.tolist(),
            "color_b": spec.color_b.tolist(),
            "seed": spec.seed,
        })

    ckpt.save(root / EMBEDDINGS_NAME, {"shape": all_e_s, "image": all_e_i},
              meta={"dim": dim, "view_noise_sigma": 0.05})
    manifest = {
        "num_shapes": n,
        "seed": seed,
        "num_points": cfg.num_points,
        "grid_size": cfg.grid_size,
        "image_size": cfg.image_size,
        "num_views": cfg.num_views,
        "camera_radius": cfg.camera_radius,
        "fov_y": cfg.fov_y,
        "near": cfg.near,
        "far": cfg.far,
        "embed_dim": dim,
        "specs": spec_rows,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return root


@dataclass
class SynthDataset:
    """In-memory view of a synthesized dataset directory."""

    root: Path
    manifest: dict
    specs: list
    points: list  # per shape [N,3]
    colors: list  # per shape [N,3]
    meshes: list  # per shape (vertices, vertex_colors, faces) numpy triple
    targets: list  # per shape dict rgb/mask/depth stacks
    e_s: np.ndarray  # [S, D]
    e_i: np.ndarray  # [S, V, D]
    views: list

    @property
    def num_shapes(self) -> int:
        return self.manifest["num_shapes"]

    @property
    def num_views(self) -> int:
        return self.manifest["num_views"]

    def target_view(self, shape: int, view: int) -> RenderTarget:
        t = self.targets[shape]
        return RenderTarget(Tensor(t["rgb"][view]), Tensor(t["mask"][view]),
                            Tensor(t["depth"][view]))

    @classmethod
    def load(cls, root) -> "SynthDataset":
        root = Path(root)
        man_path = root / MANIFEST_NAME
        if not man_path.is_file():
            raise MissingArtifactError(f"dataset manifest not found: {man_path}")
        manifest = json.loads(man_path.read_text())
        n = manifest["num_shapes"]
        specs, points, colors, meshes, targets = [], [], [], [], []
        for i in range(n):
            row = manifest["specs"][i]
            specs.append(ShapeSpec(primitive=row["primitive"], sizes=row["sizes"],
                                   color_axis=row["color_axis"], color_a=row["color_a"],
                                   color_b=row["color_b"], seed=row["seed"]))
            p, c, _ = load_ply(root / f"points_{i:03d}.ply")
            points.append(p)
            colors.append(c)
            mv, mc, mf = load_ply(root / f"mesh_{i:03d}.ply")
            meshes.append((mv, mc, mf))
            arrays, _ = ckpt.load(root / f"targets_{i:03d}.tckpt")
            targets.append(arrays)
        emb, _ = ckpt.load(root / EMBEDDINGS_NAME)
        views = make_view_set(manifest["num_views"], manifest["seed"],
                              radius=manifest["camera_radius"], fov_y=manifest["fov_y"],
                              height=manifest["image_size"], width=manifest["image_size"],
                              near=manifest["near"], far=manifest["far"])
        return cls(root=root, manifest=manifest, specs=specs, points=points,
                   colors=colors, meshes=meshes, targets=targets,
                   e_s=emb["shape"], e_i=emb["image"], views=views)


# ---------------------------------------------------------------------------
# Model assembly


class TriplaneAutoencoder(nn.Module):
    """Point cloud -> triplane latent distribution -> colored surface mesh."""

    def __init__(self, cfg: RunConfig, rng):
        self.use_attention = bool(cfg.use_attention)
        self.encoder = PointCloudEncoder(cfg, rng)
        if self.use_attention:
            self.enhancer = LatentEnhancer(cfg.latent_res, cfg.volume_channels,
                                           cfg.volume_res, cfg.volume_channels,
                                           cfg.attn_downsample, cfg.latent_channels,
                                           rng)
        self.decoder = TriplaneDecoder(SimpleNamespace(
            latent_channels=cfg.latent_channels,
            decode_channels=cfg.decoder_channels,
            latent_res=cfg.latent_res,
            decode_res=cfg.decoder_res,
            grid_size=cfg.grid_size,
        ), rng)

    def encode(self, pc: ColoredPointCloud) -> LatentDistribution:
        normalized, planes = self.encoder.volume_and_planes(pc)
        if self.use_attention:
            planes = self.enhancer(planes, normalized)
        return self.encoder.head(planes)

    def decode_mesh(self, latent: TriplaneSet):
        """Returns (mesh with colors, per-vertex color Tensor or None)."""
        planes = self.decoder(latent)
        mesh = extract_mesh(self.decoder.field(planes))
        if mesh.is_empty:
            return mesh, None
        colors = self.decoder.colors_at(planes, mesh.vertices)
        return mesh.with_colors(colors), colors

    def forward(self, pc: ColoredPointCloud):
        dist = self.encode(pc)
        mesh, colors = self.decode_mesh(dist.mu)
        return dist, mesh, colors


def build_autoencoder(cfg: RunConfig) -> TriplaneAutoencoder:
    return TriplaneAutoencoder(cfg, rng_mod.stream(cfg.seed, "ae-init"))


# ---------------------------------------------------------------------------
# Checkpoint plumbing


def _save_model(path, model: nn.Module, cfg: RunConfig, kind: str, step: int,
                extra_arrays: dict | None = None) -> None:
    arrays = dict(model.state_dict())
    if extra_arrays:
        for k, v in extra_arrays.items():
            arrays[f"stats.{k}"] = np.asarray(v)
    ckpt.save(path, arrays, meta={"kind": kind, "step": step,
                                  "config": emit_config(cfg)})


def _split_state(arrays: dict):
    state = {k: v for k, v in arrays.items() if not k.startswith("stats.")}
    stats = {k[len("stats."):]: v for k, v in arrays.items() if k.startswith("stats.")}
    return state, stats


def load_autoencoder(path, cfg: RunConfig) -> TriplaneAutoencoder:
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "autoencoder":
        raise UsageError(f"{path} is not an autoencoder checkpoint")
    model = build_autoencoder(cfg)
    state, _ = _split_state(arrays)
    model.load_state_dict(state)
    return model


def load_prior(path, cfg: RunConfig) -> PriorNet:
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "prior":
        raise UsageError(f"{path} is not a prior checkpoint")
    model = PriorNet(dim=cfg.embed_dim, width=cfg.prior_width,
                     blocks=cfg.prior_blocks, seed=cfg.seed)
    state, _ = _split_state(arrays)
    model.load_state_dict(state)
    return model


def load_triplane(path, cfg: RunConfig):
    """Returns (denoiser, per-channel latent mean, per-channel latent std)."""
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "triplane":
        raise UsageError(f"{path} is not a triplane denoiser checkpoint")
    model = TriplaneUNet(latent_channels=cfg.latent_channels, latent_res=cfg.latent_res,
                         width=cfg.unet_width, levels=cfg.unet_levels,
                         embed_dim=cfg.embed_dim, seed=cfg.seed)
    state, stats = _split_state(arrays)
    model.load_state_dict(state)
    return model, stats["latent_mean"], stats["latent_std"]


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"{what} not found: {path}")
    return path


def _write_curve(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Stage 1: autoencoder overfit under the rendering loss

# The rasterizer has attribute-only gradients: once a pixel's coverage flips,
# no gradient asks for it back, so an SDF that drifts all-positive (empty
# mesh) or all-negative (domain-filling blob) is an absorbing state.  Three
# anchor terms keep the field sane using only data the loss already consumes:
# the input cloud pins the zero level set, free space carved from the
# ground-truth silhouettes pushes the outside positive, and inward
# normal-offset points push the immediate interior negative.
_CARVE_MARGIN = 0.1
_INTERIOR_MARGIN = 0.05


def _background_evidence(points, views, masks) -> np.ndarray:
    """True where a point projects to background (or off frame) in >= 1 view.

    Points outside the visual hull of the silhouettes cannot belong to the
    object, so they are safe free-space labels.
    """
    pts = np.asarray(points, np.float64)
    outside = np.zeros(len(pts), dtype=bool)
    for cam, mask in zip(views, masks):
        sx, sy, vz = project_points(pts, cam)
        px = np.rint(sx).astype(np.int64)
        py = np.rint(sy).astype(np.int64)
        h, w = mask.shape
        in_front = vz > cam.near
        off = (px < 0) | (px >= w) | (py < 0) | (py >= h)
        bg = np.zeros(len(pts), dtype=bool)
        idx = np.where(in_front & ~off)[0]
        bg[idx] = mask[py[idx], px[idx]] < 0.5
        outside |= in_front & (off | bg)
    return outside


def _interior_points(cloud, views, masks, delta: float, count: int, rng) -> np.ndarray:
    """Inward normal offsets of surface points, oriented by the silhouettes.

    Local PCA gives an unoriented normal; whichever offset side projects to
    background in some view is outside, making the other side an interior
    label.  Ambiguous points are dropped.
    """
    n = len(cloud)
    sel = rng.choice(n, size=min(count, n), replace=False)
    pts = cloud[sel]
    k = min(16, n - 1)
    d2 = ((pts[:, None] - cloud[None]) ** 2).sum(-1)
    nn_idx = np.argsort(d2, axis=1)[:, 1:k + 1]
    nb = cloud[nn_idx] - pts[:, None]
    cov = np.einsum("ski,skj->sij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]  # smallest-variance direction
    a = pts + delta * normals
    b = pts - delta * normals
    a_out = _background_evidence(a, views, masks)
    b_out = _background_evidence(b, views, masks)
    return np.concatenate([a[b_out & ~a_out], b[a_out & ~b_out]], axis=0)


def train_autoencoder(cfg: RunConfig, log=None) -> dict:
    ds = SynthDataset.load(cfg.dataset_dir())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_autoencoder(cfg)
    opt = nn.AdamW(model.parameters(), lr=cfg.ae_lr)
    weights = LossWeights(rgb=cfg.lambda_rgb, mask=cfg.lambda_mask,
                          depth=cfg.lambda_depth, kl=cfg.lambda_kl)
    zgen = rng_mod.stream(cfg.seed, "ae-noise")
    interior = []
    if cfg.lambda_anchor > 0.0:
        irng = rng_mod.stream(cfg.seed, "ae-anchor-interior")
        for i in range(ds.num_shapes):
            interior.append(_interior_points(
                ds.points[i], ds.views, ds.targets[i]["mask"],
                delta=1.0 / cfg.grid_size, count=cfg.anchor_points // 2, rng=irng))
    ckpt_path = out / AE_CKPT
    rows = []
    t0 = time.perf_counter()
    for step in range(cfg.ae_steps):
        opt.lr = nn.cosine_lr(step, cfg.ae_steps, cfg.ae_lr, cfg.ae_lr_min)
        i = step % ds.num_shapes
        pc = ColoredPointCloud(ds.points[i], ds.colors[i])
        dist = model.encode(pc)
        planes = model.decoder(dist.sample(zgen))
        mesh = extract_mesh(model.decoder.field(planes))
        colors = None if mesh.is_empty else model.decoder.colors_at(planes, mesh.vertices)
        total = None
        comp_sums = {"rgb": 0.0, "mask": 0.0, "depth": 0.0}
        for v in range(ds.num_views):
            pred = rasterize(mesh, colors, ds.views[v])
            lv, comps = rendering_loss(pred, ds.target_view(i, v), dist=None,
                                       weights=weights)
            total = lv if total is None else total + lv
            for k in comp_sums:
                comp_sums[k] += comps[k]
        kl = dist.kl()
        render = total * (1.0 / ds.num_views) + kl * weights.kl
        loss = render
        anchor_val = 0.0
        if cfg.lambda_anchor > 0.0:
            sel = zgen.integers(0, len(pc.points),
                                size=min(cfg.anchor_points, len(pc.points)))
            sd = model.decoder.sdf_at(planes, pc.points[sel])
            anchor = (sd * sd).mean()
            q = zgen.uniform(-1.0, 1.0, (cfg.anchor_points // 2, 3))
            q = q[_background_evidence(q, ds.views, ds.targets[i]["mask"])]
            if len(q):
                hinge = relu(_CARVE_MARGIN - model.decoder.sdf_at(planes, q))
                anchor = anchor + (hinge * hinge).mean() * 0.5
            if len(interior[i]):
                hinge = relu(model.decoder.sdf_at(planes, interior[i])
                             + _INTERIOR_MARGIN)
                anchor = anchor + (hinge * hinge).mean() * 0.5
            anchor_val = anchor.item()
            loss = loss + anchor * cfg.lambda_anchor
        value = render.item()
        if not np.isfinite(loss.item()):
            raise NumericalError(f"stage-1 loss is not finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        rows.append((step, value, comp_sums["rgb"] / ds.num_views,
                     comp_sums["mask"] / ds.num_views,
                     comp_sums["depth"] / ds.num_views, kl.item(), anchor_val))
        if log and (step % 25 == 0 or step == cfg.ae_steps - 1):
            log(f"ae step {step}: render {value:.4f} anchor {anchor_val:.4f}")
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _save_model(ckpt_path, model, cfg, "autoencoder", step + 1)
    seconds = time.perf_counter() - t0
    _save_model(ckpt_path, model, cfg, "autoencoder", cfg.ae_steps)
    curve_path = out / "curve_ae.csv"
    _write_curve(curve_path, ["step", "total", "rgb", "mask", "depth", "kl", "anchor"],
                 rows)

    totals = [r[1] for r in rows]
    k = min(10, len(totals))
    first = float(np.mean(totals[:k]))
    last = float(np.mean(totals[-k:]))
    final = {"rgb": float(np.mean([r[2] for r in rows[-k:]])),
             "mask": float(np.mean([r[3] for r in rows[-k:]])),
             "depth": float(np.mean([r[4] for r in rows[-k:]])),
             "kl": float(np.mean([r[5] for r in rows[-k:]])),
             "anchor": float(np.mean([r[6] for r in rows[-k:]])),
             "total": last}
    return {"checkpoint": ckpt_path, "curve": curve_path, "steps": cfg.ae_steps,
            "first10": first, "last10": last,
            "drop": 1.0 - last / first if first else 0.0,
            "final": final, "seconds_per_step": seconds / max(cfg.ae_steps, 1)}


# ---------------------------------------------------------------------------
# Stage 2: diffusion prior over shape embeddings


def train_prior(cfg: RunConfig, log=None) -> dict:
    ds = SynthDataset.load(cfg.dataset_dir())
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ds.e_s.shape[1] != cfg.embed_dim:
        raise ShapeError(f"dataset embeddings have dim {ds.e_s.shape[1]}, "
                         f"config expects {cfg.embed_dim}")
    model = PriorNet(dim=cfg.embed_dim, width=cfg.prior_width,
                     blocks=cfg.prior_blocks, seed=cfg.seed)
    opt = nn.AdamW(model.parameters(), lr=cfg.prior_lr)
    sched = linear_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    gen = rng_mod.stream(cfg.seed, "prior-train")
    pairs = [(ds.e_s[i], ds.e_i[i, v])
             for i in range(ds.num_shapes) for v in range(ds.num_views)]
    ckpt_path = out / PRIOR_CKPT
    rows = []
    for step in range(cfg.prior_steps):
        opt.lr = nn.cosine_lr(step, cfg.prior_steps, cfg.prior_lr, cfg.prior_lr_min)
        idx = gen.integers(0, len(pairs), size=cfg.batch_size)
        value = train_step_prior([pairs[j] for j in idx], model, opt, sched, gen)
        if not np.isfinite(value):
            raise NumericalError(f"stage-2 loss is not finite at step {step}")
        rows.append((step, value))
        if log and (step % 50 == 0 or step == cfg.prior_steps - 1):
            log(f"prior step {step}: loss {value:.5f}")
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _save_model(ckpt_path, model, cfg, "prior", step + 1)
    _save_model(ckpt_path, model, cfg, "prior", cfg.prior_steps)
    curve_path = out / "curve_prior.csv"
    _write_curve(curve_path, ["step", "loss"], rows)
    k = min(10, len(rows))
    return {"checkpoint": ckpt_path, "curve": curve_path, "steps": cfg.prior_steps,
            "first10": float(np.mean([r[1] for r in rows[:k]])),
            "last10": float(np.mean([r[1] for r in rows[-k:]]))}


# ---------------------------------------------------------------------------
# Stage 3: triplane latent denoiser on the frozen encoder's means


def encode_latents(model: TriplaneAutoencoder, ds: SynthDataset) -> np.ndarray:
    """Frozen-encoder latent means for every shape, stacked [S, 3, c, r, r]."""
    mus = []
    with no_grad():
        for i in range(ds.num_shapes):
            pc = ColoredPointCloud(ds.points[i], ds.colors[i])
            mus.append(model.encode(pc).mu.stack.data)
    return np.stack(mus)


def train_triplane(cfg: RunConfig, log=None) -> dict:
    ds = SynthDataset.load(cfg.dataset_dir())
    out = Path(cfg.out_dir)
    ae_path = _require(out / AE_CKPT, "stage-1 autoencoder checkpoint")
    _require(out / PRIOR_CKPT, "stage-2 prior checkpoint")
    ae = load_autoencoder(ae_path, cfg)
    frozen = {k: v.copy() for k, v in ae.state_dict().items()}
    ae_bytes = ae_path.read_bytes()

    latents = encode_latents(ae, ds)  # [S, 3, c', r', r']
    mean = latents.mean(axis=(0, 1, 3, 4))
    std = np.maximum(latents.std(axis=(0, 1, 3, 4)), 1e-6)
    z_std = (latents - mean[None, None, :, None, None]) / std[None, None, :, None, None]

    model = TriplaneUNet(latent_channels=cfg.latent_channels, latent_res=cfg.latent_res,
                         width=cfg.unet_width, levels=cfg.unet_levels,
                         embed_dim=cfg.embed_dim, seed=cfg.seed)
    opt = nn.AdamW(model.parameters(), lr=cfg.tri_lr)
    sched = linear_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    gen = rng_mod.stream(cfg.seed, "tri-train")
    triples = [(z_std[i], ds.e_s[i], ds.e_i[i, v])
               for i in range(ds.num_shapes) for v in range(ds.num_views)]
    stats = {"latent_mean": mean, "latent_std": std}
    ckpt_path = out / TRI_CKPT
    rows = []
    for step in range(cfg.tri_steps):
        opt.lr = nn.cosine_lr(step, cfg.tri_steps, cfg.tri_lr, cfg.tri_lr_min)
        idx = gen.integers(0, len(triples), size=cfg.batch_size)
        value = train_step_triplane([triples[j] for j in idx], model, opt, sched, gen)
        if not np.isfinite(value):
            raise NumericalError(f"stage-3 loss is not finite at step {step}")
        rows.append((step, value))
        if log and (step % 50 == 0 or step == cfg.tri_steps - 1):
            log(f"triplane step {step}: loss {value:.5f}")
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _save_model(ckpt_path, model, cfg, "triplane", step + 1, extra_arrays=stats)
    _save_model(ckpt_path, model, cfg, "triplane", cfg.tri_steps, extra_arrays=stats)
    curve_path = out / "curve_tri.csv"
    _write_curve(curve_path, ["step", "loss"], rows)

    # Stage isolation: the frozen stages must be bit-identical after training.
    now = ae.state_dict()
    if any(not np.array_equal(frozen[k], now[k]) for k in frozen):
        raise RuntimeError("stage isolation violated: stage-1 parameters changed "
                           "during stage-3 training")
    if ae_path.read_bytes() != ae_bytes:
        raise RuntimeError(f"stage isolation violated: {ae_path} was rewritten")
    k = min(10, len(rows))
    return {"checkpoint": ckpt_path, "curve": curve_path, "steps": cfg.tri_steps,
            "first10": float(np.mean([r[1] for r in rows[:k]])),
            "last10": float(np.mean([r[1] for r in rows[-k:]])),
            "latent_mean": mean, "latent_std": std}


# ---------------------------------------------------------------------------
# Generation


def turntable_cameras(cfg: RunConfig, count: int = 4, elevation_deg: float = 20.0):
    cams = []
    el = np.deg2rad(elevation_deg)
    for k in range(count):
        az = 2.0 * np.pi * k / count
        pos = cfg.camera_radius * np.array([np.cos(az) * np.cos(el),
                                            np.sin(az) * np.cos(el),
                                            np.sin(el)])
        cams.append(Camera(pos, np.zeros(3), np.array([0.0, 0.0, 1.0]),
                           fov_y=cfg.fov_y, height=cfg.image_size,
                           width=cfg.image_size, near=cfg.near, far=cfg.far))
    return cams


def generate(cfg: RunConfig, shape_index: int | None = None, view_index: int = 0,
             embedding=None, use_prior: bool = True, tag: str | None = None,
             turntable: int = 4, export: bool = True, log=None) -> dict:
    """Image embedding -> prior -> guided latent sampling -> colored mesh."""
    out = Path(cfg.out_dir)
    ae = load_autoencoder(_require(out / AE_CKPT, "stage-1 autoencoder checkpoint"), cfg)
    prior = load_prior(_require(out / PRIOR_CKPT, "stage-2 prior checkpoint"), cfg)
    unet, lat_mean, lat_std = load_triplane(
        _require(out / TRI_CKPT, "stage-3 denoiser checkpoint"), cfg)

    if embedding is not None:
        e_i = np.asarray(embedding, np.float64).reshape(-1)
        if e_i.shape[0] != cfg.embed_dim:
            raise ShapeError(f"image embedding has dim {e_i.shape[0]}, "
                             f"checkpoints expect {cfg.embed_dim}")
        if tag is None:
            tag = "gen_file"
    else:
        ds = SynthDataset.load(cfg.dataset_dir())
        if shape_index is None:
            shape_index = 0
        if not (0 <= shape_index < ds.num_shapes):
            raise UsageError(f"shape index {shape_index} outside dataset "
                             f"of {ds.num_shapes}")
        if not (0 <= view_index < ds.num_views):
            raise UsageError(f"view index {view_index} outside view set "
                             f"of {ds.num_views}")
        e_i = ds.e_i[shape_index, view_index]
        if tag is None:
            tag = f"gen_{shape_index:03d}_v{view_index:02d}"

    sched = linear_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    if use_prior:
        scaled = ddim_sample_prior(prior, e_i * IMAGE_EMBED_SCALE, cfg.sample_steps,
                                   rng_mod.stream(cfg.seed, f"gen-prior/{tag}"), sched)
        e_s = scaled / SHAPE_EMBED_SCALE
    else:
        # Without the prior there is no shape embedding; fall back to the
        # denoiser's learned unconditional token.
        e_s = unet.null_shape.data.copy()
    guidance = GuidanceConfig(s_s=cfg.guidance_shape, s_p=cfg.guidance_image,
                              null_shape=unet.null_shape.data,
                              null_image=unet.null_image.data)
    z_std = ddim_sample(unet, {"shape": e_s, "image": e_i}, guidance,
                        cfg.sample_steps,
                        rng_mod.stream(cfg.seed, f"gen-latent/{tag}"), sched)
    z = z_std.stack.data * lat_std[None, :, None, None] + lat_mean[None, :, None, None]
    with no_grad():
        mesh, colors = ae.decode_mesh(TriplaneSet(Tensor(z)))
    if log:
        log(f"{tag}: {mesh.num_vertices} vertices, {mesh.num_faces} faces")

    paths = {}
    if export:
        paths = export_mesh_assets(cfg, tag, mesh, colors, turntable)
    return {"mesh": mesh, "tag": tag, "paths": paths,
            "shape_embedding": e_s, "image_embedding": e_i}


def export_mesh_assets(cfg: RunConfig, tag: str, mesh: SurfaceMesh, colors,
                       turntable: int = 4) -> dict:
    """Write OBJ + PLY + turntable PNGs for a decoded mesh under out_dir."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    verts = np.zeros((0, 3)) if mesh.is_empty else mesh.vertices.data
    vcols = None if mesh.is_empty else colors.data
    obj_path = out / f"{tag}.obj"
    ply_path = out / f"{tag}.ply"
    save_obj(obj_path, verts, mesh.faces, colors=vcols)
    save_ply(ply_path, verts, colors=vcols, faces=mesh.faces)
    paths = {"obj": obj_path, "ply": ply_path, "png": []}
    with no_grad():
        for k, cam in enumerate(turntable_cameras(cfg, turntable)):
            rt = rasterize(mesh, None if mesh.is_empty else colors, cam)
            png = out / f"{tag}_view{k}.png"
            save_png(png, rt.rgb.data)
            paths["png"].append(png)
    return paths


def export_reconstruction(cfg: RunConfig, shape_index: int = 0, turntable: int = 4,
                          tag: str | None = None, log=None) -> dict:
    """Round-trip one dataset shape through the trained autoencoder and export it."""
    out = Path(cfg.out_dir)
    ae = load_autoencoder(_require(out / AE_CKPT, "stage-1 autoencoder checkpoint"), cfg)
    ds = SynthDataset.load(cfg.dataset_dir())
    if not (0 <= shape_index < ds.num_shapes):
        raise UsageError(f"shape index {shape_index} outside dataset "
                         f"of {ds.num_shapes}")
    pc = ColoredPointCloud(ds.points[shape_index], ds.colors[shape_index])
    with no_grad():
        mesh, colors = ae.decode_mesh(ae.encode(pc).mu)
    if tag is None:
        tag = f"recon_{shape_index:03d}"
    if log:
        log(f"{tag}: {mesh.num_vertices} vertices, {mesh.num_faces} faces")
    paths = export_mesh_assets(cfg, tag, mesh, colors, turntable)
    return {"mesh": mesh, "tag": tag, "paths": paths}


def mesh_sample_points(mesh: SurfaceMesh, count: int = 2048, seed: int = 0) -> np.ndarray:
    samples = surface_samples(mesh, count, rng_mod.stream(seed, "retrieval-samples"))
    return samples.points.data


def retrieval_scores(cfg: RunConfig, ds: SynthDataset, use_prior: bool,
                     view_index: int = 0, sample_count: int = 2048, log=None):
    """Generate per training embedding; Chamfer-match against every gt cloud.

    Returns (hits, chamfer matrix [S, S]) where row i holds distances from
    generation i to each shape's surface points.
    """
    n = ds.num_shapes
    gt = [ds.points[j][:sample_count] for j in range(n)]
    dists = np.full((n, n), np.inf)
    for i in range(n):
        res = generate(cfg, shape_index=i, view_index=view_index,
                       use_prior=use_prior, export=False,
                       tag=f"retr_{int(use_prior)}_{i:03d}", log=log)
        mesh = res["mesh"]
        if mesh.is_empty:
            continue
        pts = mesh_sample_points(mesh, sample_count, cfg.seed)
        for j in range(n):
            dists[i, j] = chamfer_distance(pts, gt[j])
    hits = int(sum(1 for i in range(n) if np.argmin(dists[i]) == i
                   and np.isfinite(dists[i, i])))
    return hits, dists


# ---------------------------------------------------------------------------
# Ablations


ABLATION_AXES = ("attention", "volume-res", "prior", "guidance")


def _format_table(header, rows) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[j]) for row in cells) for j in range(len(header))]
    lines = []
    for k, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _write_report(root: Path, header, rows) -> dict:
    root.mkdir(parents=True, exist_ok=True)
    csv_path = root / "report.csv"
    _write_curve(csv_path, header, rows)
    txt_path = root / "report.txt"
    txt_path.write_text(_format_table(header, rows))
    return {"csv": csv_path, "txt": txt_path, "table": _format_table(header, rows)}


def ablate(cfg: RunConfig, axis: str, log=None) -> dict:
    axis = axis.strip().lower()
    if axis not in ABLATION_AXES:
        raise UsageError(f"unknown ablation axis {axis!r}; "
                         f"expected one of {', '.join(ABLATION_AXES)}")
    root = Path(cfg.out_dir) / "ablate" / axis

    if axis == "attention":
        header = ["variant", "rgb_x1e3", "mask_x1e3", "depth_x1e3", "seconds_per_step"]
        rows = []
        for flag in (True, False):
            name = "with-attention" if flag else "no-attention"
            sub = replace(cfg, use_attention=flag, out_dir=str(root / name))
            if not Path(sub.dataset_dir()).joinpath(MANIFEST_NAME).is_file():
                sub = replace(sub, data_dir=str(synth_dataset(sub)))
            summary = train_autoencoder(sub, log=log)
            f = summary["final"]
            rows.append([name, f"{1e3 * f['rgb']:.3f}", f"{1e3 * f['mask']:.3f}",
                         f"{1e3 * f['depth']:.3f}",
                         f"{summary['seconds_per_step']:.3f}"])
        return _write_report(root, header, rows)

    if axis == "volume-res":
        header = ["attn_volume_res", "rgb_x1e3", "mask_x1e3", "depth_x1e3"]
        rows = []
        for factor in (cfg.attn_downsample, cfg.attn_downsample * 2):
            if cfg.volume_res % factor:
                continue
            sub = replace(cfg, attn_downsample=factor,
                          out_dir=str(root / f"res{cfg.volume_res // factor}"))
            if not Path(sub.dataset_dir()).joinpath(MANIFEST_NAME).is_file():
                sub = replace(sub, data_dir=str(synth_dataset(sub)))
            summary = train_autoencoder(sub, log=log)
            f = summary["final"]
            rows.append([str(cfg.volume_res // factor), f"{1e3 * f['rgb']:.3f}",
                         f"{1e3 * f['mask']:.3f}", f"{1e3 * f['depth']:.3f}"])
        return _write_report(root, header, rows)

    ds = SynthDataset.load(cfg.dataset_dir())
    if axis == "prior":
        header = ["variant", "retrieval", "mean_self_chamfer"]
        rows = []
        for flag in (True, False):
            hits, dists = retrieval_scores(cfg, ds, use_prior=flag, log=log)
            own = np.diag(dists)
            own = own[np.isfinite(own)]
            rows.append(["with-prior" if flag else "no-prior",
                         f"{hits}/{ds.num_shapes}",
                         f"{np.mean(own):.5f}" if own.size else "inf"])
        return _write_report(root, header, rows)

    # guidance grid
    header = ["s_shape", "s_image", "retrieval", "mean_self_chamfer"]
    rows = []
    for s_s in (1.0, 3.0, 5.0, 10.0):
        for s_p in (1.0, 3.0, 5.0, 10.0):
            sub = replace(cfg, guidance_shape=s_s, guidance_image=s_p)
            hits, dists = retrieval_scores(sub, ds, use_prior=True, log=log)
            own = np.diag(dists)
            own = own[np.isfinite(own)]
            rows.append([f"{s_s:g}", f"{s_p:g}", f"{hits}/{ds.num_shapes}",
                         f"{np.mean(own):.5f}" if own.size else "inf"])
    return _write_report(root, header, rows)
