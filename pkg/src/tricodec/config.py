"""Run configuration: one flat dataclass, two named profiles, key=value IO.

The desk profile is sized to overfit a handful of procedural shapes on a CPU
in minutes.  The paper profile carries the published constants; it is a
configuration statement, not something this codebase is expected to train.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ShapeError, UsageError


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    out_dir: str = "runs"
    data_dir: str = ""  # empty -> <out_dir>/dataset

    # dataset
    num_shapes: int = 8
    num_points: int = 2048

    # encoder: feature volume and latent planes
    volume_res: int = 16
    volume_channels: int = 8
    latent_res: int = 4
    latent_channels: int = 4
    pointnet_freqs: int = 6

    # 3D-aware cross-attention
    use_attention: bool = True
    attn_downsample: int = 2  # volume_res / this = key/value resolution

    # decoder and isosurface
    decoder_res: int = 16
    decoder_channels: int = 8
    grid_size: int = 16
    head_width: int = 32

    # rendering
    image_size: int = 64
    num_views: int = 8
    camera_radius: float = 3.0
    fov_y: float = 60.0
    near: float = 0.1
    far: float = 10.0
    lambda_rgb: float = 10.0
    lambda_mask: float = 10.0
    lambda_depth: float = 0.1
    lambda_kl: float = 1e-6

    # stage 1 (autoencoder)
    ae_steps: int = 500
    ae_lr: float = 3e-3
    ae_lr_min: float = 3e-4
    # surface anchor: pins the decoded SDF to ~0 at the input cloud's points.
    # The hard-coverage rasterizer has no silhouette gradients, so without
    # this keep-alive term an all-positive SDF is an absorbing state.
    lambda_anchor: float = 1.0
    anchor_points: int = 512

    # embeddings and diffusion
    embed_dim: int = 64
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    # stage 2 (prior)
    prior_width: int = 128
    prior_blocks: int = 4
    prior_steps: int = 600
    prior_lr: float = 2e-3
    prior_lr_min: float = 2e-4

    # stage 3 (triplane diffusion)
    unet_width: int = 32
    unet_levels: int = 2
    tri_steps: int = 600
    tri_lr: float = 2e-3
    tri_lr_min: float = 2e-4
    batch_size: int = 4

    # sampling
    sample_steps: int = 50
    guidance_shape: float = 1.0
    guidance_image: float = 5.0

    checkpoint_every: int = 100

    def __post_init__(self):
        if self.profile not in ("desk", "paper"):
            raise UsageError(f"unknown profile {self.profile!r}")

    # -- derived ---------------------------------------------------------

    @property
    def attn_volume_res(self) -> int:
        return self.volume_res // self.attn_downsample

    def latent_scalars(self) -> int:
        """Total scalars in one latent triplane set (3 planes)."""
        return 3 * self.latent_res * self.latent_res * self.latent_channels

    def dataset_dir(self) -> Path:
        return Path(self.data_dir) if self.data_dir else Path(self.out_dir) / "dataset"


_PAPER_OVERRIDES = dict(
    profile="paper",
    num_points=100_000,
    volume_res=128,
    volume_channels=32,
    latent_res=32,
    latent_channels=32,
    attn_downsample=4,  # 128 -> 32 key/value resolution
    decoder_res=128,
    decoder_channels=32,
    grid_size=90,
    image_size=512,
    num_views=40,
    embed_dim=1280,
    lambda_rgb=10.0,
    lambda_mask=10.0,
    lambda_depth=0.1,
    lambda_kl=1e-6,
    ae_lr=3e-5,
    ae_lr_min=3e-6,
    prior_lr=1e-5,
    prior_lr_min=1e-6,
    tri_lr=1e-5,
    tri_lr_min=1e-6,
    diffusion_steps=1000,
    sample_steps=50,
    guidance_shape=1.0,
    guidance_image=5.0,
)


def make_config(profile: str = "desk", **overrides) -> RunConfig:
    if profile == "desk":
        cfg = RunConfig()
    elif profile == "paper":
        cfg = replace(RunConfig(), **_PAPER_OVERRIDES)
    else:
        raise UsageError(f"unknown profile {profile!r}")
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


# ---------------------------------------------------------------------------
# key=value round trip


def emit_config(cfg: RunConfig) -> str:
    lines = [f"# run configuration ({cfg.profile} profile)"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    typed = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in typed:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        t = typed[key]
        if t in ("bool", bool):
            if raw not in ("true", "false"):
                raise UsageError(f"config line {lineno}: {key} must be true/false")
            values[key] = raw == "true"
        elif t in ("int", int):
            values[key] = int(raw)
        elif t in ("float", float):
            values[key] = float(raw)
        else:
            values[key] = raw
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    return parse_config(p.read_text())


def save_config(cfg: RunConfig, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(emit_config(cfg))
