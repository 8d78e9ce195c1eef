"""Colored point cloud -> triplane latent distribution.

Stages: per-point features from a small PointNet with sinusoidal position
embedding and local max pooling, trilinear splatting onto a dense feature
volume, density normalization, tri-directional volume-to-plane convolutions,
a ResBlock/downsample stack, and a VAE head producing per-plane mean and
log-sigma at the latent resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import core, ops
from .tensor.core import Tensor, astensor
from .tensor import nn


@dataclass
class ColoredPointCloud:
    """N points in [-1,1]^3 with RGB in [0,1]; clamped on construction."""

    points: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeError(f"point cloud positions must be [N,3], got {self.points.shape}")
        if self.colors.shape != self.points.shape:
            raise ShapeError(
                f"colors {self.colors.shape} must match positions {self.points.shape}"
            )
        if self.points.shape[0] < 1:
            raise ShapeError("point cloud must contain at least one point")
        self.points = np.clip(self.points, -1.0, 1.0)
        self.colors = np.clip(self.colors, 0.0, 1.0)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class FeatureVolume:
    """Dense r^3 grid of c-channel features, channels last."""

    grid: Tensor  # [r, r, r, c]
    weight_sums: np.ndarray  # [r, r, r]

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    @property
    def channels(self) -> int:
        return self.grid.shape[3]


class TriplaneSet:
    """Three axis-aligned feature planes at shared resolution and channels.

    Stored stacked as [3, C, R, R] with plane order (xy, yz, zx) and the
    cyclic in-plane axis convention: plane_xy is indexed (x, y), plane_yz
    (y, z), plane_zx (z, x).
    """

    def __init__(self, stack: Tensor):
        stack = astensor(stack)
        if stack.ndim != 4 or stack.shape[0] != 3 or stack.shape[2] != stack.shape[3]:
            raise ShapeError(f"triplane stack must be [3,C,R,R], got {stack.shape}")
        self.stack = stack

    @classmethod
    def from_planes(cls, xy, yz, zx) -> "TriplaneSet":
        planes = [astensor(p) for p in (xy, yz, zx)]
        shapes = {p.shape for p in planes}
        if len(shapes) != 1:
            raise ShapeError(f"planes disagree in shape: {[p.shape for p in planes]}")
        return cls(core.stack(planes, axis=0))

    @property
    def resolution(self) -> int:
        return self.stack.shape[2]

    @property
    def channels(self) -> int:
        return self.stack.shape[1]

    def plane(self, k: int) -> Tensor:
        """Plane k in (0=xy, 1=yz, 2=zx), channel-first [C,R,R]."""
        return self.stack[k]

    # channel-last accessors matching the documented field layout
    @property
    def plane_xy(self) -> Tensor:
        return core.transpose(self.stack[0], (1, 2, 0))

    @property
    def plane_yz(self) -> Tensor:
        return core.transpose(self.stack[1], (1, 2, 0))

    @property
    def plane_zx(self) -> Tensor:
        return core.transpose(self.stack[2], (1, 2, 0))

    def detach(self) -> "TriplaneSet":
        return TriplaneSet(self.stack.detach())


@dataclass
class LatentDistribution:
    """Per-plane Gaussian over the latent triplane; log_sigma pre-clamped."""

    mu: TriplaneSet
    log_sigma: TriplaneSet

    def sample(self, rng: np.random.Generator) -> TriplaneSet:
        eps = rng.standard_normal(tuple(self.mu.stack.shape))
        z = self.mu.stack + core.exp(self.log_sigma.stack) * eps
        return TriplaneSet(z)

    def kl(self) -> Tensor:
        """KL divergence to the standard normal, summed over all latent dims."""
        mu, ls = self.mu.stack, self.log_sigma.stack
        var = core.exp(ls * 2.0)
        return ((mu * mu + var - 1.0 - ls * 2.0) * 0.5).sum()

    def num_scalars(self) -> int:
        return int(self.mu.stack.size)


def sample_latent(dist: LatentDistribution, rng: np.random.Generator) -> TriplaneSet:
    return dist.sample(rng)


def kl_penalty(dist: LatentDistribution) -> Tensor:
    return dist.kl()


# ---------------------------------------------------------------------------
# PointNet with sinusoidal position embedding and per-voxel-cell max pooling


def sinusoidal_point_embedding(points: np.ndarray, num_freqs: int = 6) -> np.ndarray:
    """[N,3] -> [N, 6*num_freqs]: sin/cos of 2^k * pi * coord per axis."""
    freqs = (2.0 ** np.arange(num_freqs)) * np.pi
    angles = points[:, :, None] * freqs[None, None, :]  # [N,3,F]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=2)
    return emb.reshape(points.shape[0], -1)


def voxel_cell_ids(points: np.ndarray, res: int) -> np.ndarray:
    """Flat index of the res^3 cell each point falls in ([-1,1] mapped to [0,res))."""
    cell = np.clip(np.floor((points + 1.0) * 0.5 * res).astype(np.int64), 0, res - 1)
    return (cell[:, 0] * res + cell[:, 1]) * res + cell[:, 2]


class PointFeatureNet(nn.Module):
    """Per-point features: embed -> MLP -> local max pool -> MLP."""

    def __init__(self, channels: int, rng, num_freqs: int = 6):
        self.channels = channels
        self.num_freqs = num_freqs
        in_dim = 6 * num_freqs + 3  # sinusoidal xyz + rgb
        self.lin1 = nn.Linear(in_dim, channels, rng)
        self.lin2 = nn.Linear(2 * channels, channels, rng)
        self.lin3 = nn.Linear(channels, channels, rng)

    def forward(self, pc: ColoredPointCloud, pool_res: int) -> Tensor:
        emb = np.concatenate(
            [sinusoidal_point_embedding(pc.points, self.num_freqs), pc.colors], axis=1
        )
        h = core.silu(self.lin1(Tensor(emb)))
        cells = voxel_cell_ids(pc.points, pool_res)
        pooled = ops.segment_max(h, cells, pool_res**3)[cells]
        h = core.silu(self.lin2(core.concat([h, pooled], axis=1)))
        return self.lin3(h)


def pointnet_features(net: PointFeatureNet, pc: ColoredPointCloud, pool_res: int) -> Tensor:
    return net(pc, pool_res)


# ---------------------------------------------------------------------------
# Trilinear splatting and density normalization


def _trilinear_corners(points: np.ndarray, r: int):
    """8 corner flat ids + weights per point for a node grid of r^3.

    Coordinates map [-1,1] -> [0, r-1]; the weight of a corner is the product
    over axes of (1 - |distance to that corner|).
    """
    g = (points + 1.0) * 0.5 * (r - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, r - 2)
    frac = g - i0  # in [0,1]
    idx = np.empty((points.shape[0], 8), np.int64)
    wts = np.empty((points.shape[0], 8), np.float64)
    k = 0
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                idx[:, k] = ((i0[:, 0] + dx) * r + (i0[:, 1] + dy)) * r + (i0[:, 2] + dz)
                wts[:, k] = wx * wy * wz
                k += 1
    return idx, wts


def splat_to_volume(points: np.ndarray, feats, r: int) -> FeatureVolume:
    """Scatter per-point features onto grid nodes with trilinear weights.

    Gradients flow to the features only; positions are data.  Returns the
    unnormalized volume plus the per-node weight sums needed to cancel
    point-density variation.
    """
    if r < 2:
        raise ShapeError(f"volume resolution must be >= 2, got {r}")
    feats = astensor(feats)
    points = np.clip(np.asarray(points, dtype=np.float64), -1.0, 1.0)
    if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] != feats.shape[0]:
        raise ShapeError(f"points {points.shape} vs feats {feats.shape} disagree")
    idx, wts = _trilinear_corners(points, r)
    flat, wsum = ops.splat(idx, wts, feats, r**3)
    c = feats.shape[1]
    return FeatureVolume(flat.reshape(r, r, r, c), wsum.reshape(r, r, r))


def normalize_volume(vol: FeatureVolume, eps: float = 1e-8) -> Tensor:
    """Divide each occupied node by its weight sum; unoccupied nodes stay zero."""
    wsum = vol.weight_sums
    occupied = wsum > eps
    factor = np.where(occupied, 1.0 / np.where(occupied, wsum, 1.0), 0.0)
    return vol.grid * factor[:, :, :, None]


# ---------------------------------------------------------------------------
# Volume -> triplane projection (learned full-axis convolutions)


def _volume_to_5d(grid: Tensor) -> Tensor:
    """[X,Y,Z,C] -> [1,C,X,Y,Z] for convolution."""
    return core.transpose(grid, (3, 0, 1, 2)).reshape(
        1, grid.shape[3], grid.shape[0], grid.shape[1], grid.shape[2]
    )


class TriplaneProjector(nn.Module):
    """Collapse each volume axis with a learned conv spanning that whole axis."""

    def __init__(self, channels: int, resolution: int, rng):
        self.resolution = resolution
        r = resolution
        self.conv_drop_z = nn.Conv3d(channels, channels, (1, 1, r), rng, stride=(1, 1, r))
        self.conv_drop_x = nn.Conv3d(channels, channels, (r, 1, 1), rng, stride=(r, 1, 1))
        self.conv_drop_y = nn.Conv3d(channels, channels, (1, r, 1), rng, stride=(1, r, 1))

    def forward(self, normalized_grid: Tensor) -> TriplaneSet:
        r = self.resolution
        if normalized_grid.shape[:3] != (r, r, r):
            raise ShapeError(
                f"projector built for resolution {r}, got volume {normalized_grid.shape}"
            )
        c = normalized_grid.shape[3]
        vol = _volume_to_5d(normalized_grid)
        xy = self.conv_drop_z(vol).reshape(c, r, r)  # indexed (x, y)
        yz = self.conv_drop_x(vol).reshape(c, r, r)  # indexed (y, z)
        xz = self.conv_drop_y(vol).reshape(c, r, r)  # indexed (x, z)
        zx = core.transpose(xz, (0, 2, 1))  # reorder to (z, x)
        return TriplaneSet.from_planes(xy, yz, zx)


def project_to_triplanes(projector: TriplaneProjector, normalized_grid: Tensor) -> TriplaneSet:
    return projector(normalized_grid)


# ---------------------------------------------------------------------------
# ResBlock / downsample stack and the VAE head


class ResBlock2d(nn.Module):
    """norm -> SiLU -> 3x3 conv, twice, plus the identity skip."""

    def __init__(self, channels: int, rng):
        self.norm1 = nn.GroupNorm(channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, rng, padding=1)
        self.norm2 = nn.GroupNorm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(core.silu(self.norm1(x)))
        h = self.conv2(core.silu(self.norm2(h)))
        return x + h


class PlaneDownStack(nn.Module):
    """[ResBlock -> stride-2 conv] until the latent resolution is reached."""

    def __init__(self, channels: int, res_in: int, res_out: int, rng):
        ratio = res_in / res_out
        stages = int(round(np.log2(ratio))) if ratio >= 1 else -1
        if stages < 0 or 2**stages != ratio:
            raise ShapeError(
                f"plane resolution {res_in} -> {res_out} is not a power-of-two reduction"
            )
        self.blocks = [ResBlock2d(channels, rng) for _ in range(stages)]
        self.downs = [
            nn.Conv2d(channels, channels, 3, rng, stride=2, padding=1) for _ in range(stages)
        ]

    def forward(self, planes: TriplaneSet) -> TriplaneSet:
        x = planes.stack
        for block, down in zip(self.blocks, self.downs):
            x = down(block(x))
        return TriplaneSet(x)


def encode_down(stack_module: PlaneDownStack, planes: TriplaneSet) -> TriplaneSet:
    return stack_module(planes)


LOG_SIGMA_MIN, LOG_SIGMA_MAX = -30.0, 20.0


class VaeHead(nn.Module):
    """1x1 conv to 2*c_lat channels, split into mean and clamped log-sigma."""

    def __init__(self, channels_in: int, channels_lat: int, rng):
        self.channels_lat = channels_lat
        self.proj = nn.Conv2d(channels_in, 2 * channels_lat, 1, rng)

    def forward(self, planes: TriplaneSet) -> LatentDistribution:
        both = self.proj(planes.stack)
        c = self.channels_lat
        mu = both[:, :c]
        log_sigma = core.clamp(both[:, c:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return LatentDistribution(TriplaneSet(mu), TriplaneSet(log_sigma))


def vae_head(head: VaeHead, planes: TriplaneSet) -> LatentDistribution:
    return head(planes)


# ---------------------------------------------------------------------------
# Full encoder


class PointCloudEncoder(nn.Module):
    """Point cloud -> (normalized feature volume, latent distribution input planes)."""

    def __init__(self, cfg, rng):
        self.res = cfg.volume_res
        self.channels = cfg.volume_channels
        self.res_lat = cfg.latent_res
        self.channels_lat = cfg.latent_channels
        self.pointnet = PointFeatureNet(self.channels, rng, num_freqs=cfg.pointnet_freqs)
        self.projector = TriplaneProjector(self.channels, self.res, rng)
        self.down = PlaneDownStack(self.channels, self.res, self.res_lat, rng)
        self.head = VaeHead(self.channels, self.channels_lat, rng)

    def volume_and_planes(self, pc: ColoredPointCloud):
        """Normalized feature volume plus pre-head latent planes (both AD-connected)."""
        feats = self.pointnet(pc, self.res)
        vol = splat_to_volume(pc.points, feats, self.res)
        normalized = normalize_volume(vol)
        planes = self.projector(normalized)
        return normalized, self.down(planes)

    def forward(self, pc: ColoredPointCloud) -> LatentDistribution:
        _, latent_planes = self.volume_and_planes(pc)
        return self.head(latent_planes)
