"""Latent triplane -> decoded feature planes -> isosurface field and colors.

The decoder upsamples the latent planes back to a working resolution, then
small MLP heads read bilinearly sampled plane features at arbitrary 3D
points: signed distance, extraction weight, and vertex deformation at the
isosurface grid vertices, and RGB at surface points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import TriplaneSet, ResBlock2d
from .errors import ShapeError
from .tensor import core, nn, ops
from .tensor.core import Tensor, astensor


@dataclass
class FlexiField:
    """Per-grid-vertex isosurface quantities on a (G+1)^3 node lattice.

    sdf in [-1,1] (tanh), weight > 0 (softplus), deformation clamped inside
    half a cell per component (tanh * cell/2).  Node (i,j,k) sits at
    -1 + 2*i/G etc.; arrays are flattened in x-major order.
    """

    sdf: Tensor  # [(G+1)^3]
    weight: Tensor  # [(G+1)^3]
    deform: Tensor  # [(G+1)^3, 3]
    grid_size: int

    @property
    def cell_size(self) -> float:
        return 2.0 / self.grid_size

    def base_positions(self) -> np.ndarray:
        return grid_vertices(self.grid_size)


def grid_vertices(grid_size: int) -> np.ndarray:
    """[(G+1)^3, 3] lattice node positions spanning [-1,1]^3, x-major."""
    n = grid_size + 1
    axis = np.linspace(-1.0, 1.0, n)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([x, y, z], axis=-1).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Upsampling stack


class PlaneUpStack(nn.Module):
    """[ResBlock -> nearest 2x upsample -> conv] until the decode resolution."""

    def __init__(self, channels_in: int, channels_out: int, res_in: int, res_out: int, rng):
        ratio = res_out / res_in
        stages = int(round(np.log2(ratio))) if ratio >= 1 else -1
        if stages < 0 or 2**stages != ratio:
            raise ShapeError(
                f"plane resolution {res_in} -> {res_out} is not a power-of-two increase"
            )
        self.blocks = []
        self.convs = []
        ch = channels_in
        for _ in range(stages):
            self.blocks.append(ResBlock2d(ch, rng))
            self.convs.append(nn.Conv2d(ch, channels_out, 3, rng, padding=1))
            ch = channels_out
        self.channels_out = ch

    def forward(self, planes: TriplaneSet) -> TriplaneSet:
        x = planes.stack
        for block, conv in zip(self.blocks, self.convs):
            x = conv(ops.upsample_nearest2d(block(x), 2))
        return TriplaneSet(x)


def decode_up(stack_module: PlaneUpStack, latent: TriplaneSet) -> TriplaneSet:
    return stack_module(latent)


# ---------------------------------------------------------------------------
# Bilinear triplane sampling (differentiable in both planes and points)


def sample_triplane(planes: TriplaneSet, points) -> Tensor:
    """Sum of bilinear samples of the three planes at each 3D point.

    points: [M,3] in [-1,1]^3 (clamped).  Plane k reads the cyclic coordinate
    pair: xy <- (x,y), yz <- (y,z), zx <- (z,x).  Returns [M, channels].
    """
    pts = core.clamp(astensor(points), -1.0, 1.0)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"sample points must be [M,3], got {pts.shape}")
    R = planes.resolution
    total = None
    for k, (ai, aj) in enumerate(((0, 1), (1, 2), (2, 0))):
        gu = (pts[:, ai] + 1.0) * (0.5 * (R - 1))
        gv = (pts[:, aj] + 1.0) * (0.5 * (R - 1))
        i0 = np.clip(np.floor(gu.data).astype(np.int64), 0, R - 2)
        j0 = np.clip(np.floor(gv.data).astype(np.int64), 0, R - 2)
        fu = (gu - i0).reshape(-1, 1)
        fv = (gv - j0).reshape(-1, 1)
        plane = core.transpose(planes.plane(k), (1, 2, 0))  # [R,R,C]
        f00 = plane[(i0, j0)]
        f01 = plane[(i0, j0 + 1)]
        f10 = plane[(i0 + 1, j0)]
        f11 = plane[(i0 + 1, j0 + 1)]
        acc = (
            f00 * ((1.0 - fu) * (1.0 - fv))
            + f01 * ((1.0 - fu) * fv)
            + f10 * (fu * (1.0 - fv))
            + f11 * (fu * fv)
        )
        total = acc if total is None else total + acc
    return total


# ---------------------------------------------------------------------------
# Heads


class HeadMLP(nn.Module):
    """2 hidden layers of width 32 with SiLU, then a linear read-out."""

    def __init__(self, in_dim: int, out_dim: int, rng, width: int = 32):
        self.l1 = nn.Linear(in_dim, width, rng)
        self.l2 = nn.Linear(width, width, rng)
        self.l3 = nn.Linear(width, out_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.l3(core.silu(self.l2(core.silu(self.l1(x)))))


class FieldHeads(nn.Module):
    """Per-point SDF / weight / deformation heads over sampled plane features."""

    def __init__(self, feat_dim: int, rng, width: int = 32):
        self.sdf_mlp = HeadMLP(feat_dim, 1, rng, width)
        self.weight_mlp = HeadMLP(feat_dim, 1, rng, width)
        self.deform_mlp = HeadMLP(feat_dim, 3, rng, width)

    def forward(self, planes: TriplaneSet, grid_size: int) -> FlexiField:
        if grid_size < 2:
            raise ShapeError(f"isosurface grid size must be >= 2, got {grid_size}")
        verts = grid_vertices(grid_size)
        feats = sample_triplane(planes, verts)
        sdf = core.tanh(self.sdf_mlp(feats)).reshape(-1)
        weight = core.softplus(self.weight_mlp(feats)).reshape(-1)
        half_cell = 1.0 / grid_size
        deform = core.tanh(self.deform_mlp(feats)) * half_cell
        return FlexiField(sdf=sdf, weight=weight, deform=deform, grid_size=grid_size)

    def sdf_at(self, planes: TriplaneSet, points) -> Tensor:
        """Signed distance at arbitrary query points, same head as the grid pass."""
        return core.tanh(self.sdf_mlp(sample_triplane(planes, points))).reshape(-1)


def field_heads(heads: FieldHeads, planes: TriplaneSet, grid_size: int) -> FlexiField:
    return heads(planes, grid_size)


class ColorHead(nn.Module):
    """Sigmoid RGB at surface points from sampled plane features."""

    def __init__(self, feat_dim: int, rng, width: int = 32):
        self.mlp = HeadMLP(feat_dim, 3, rng, width)

    def forward(self, planes: TriplaneSet, points) -> Tensor:
        return core.sigmoid(self.mlp(sample_triplane(planes, points)))


def color_head(head: ColorHead, planes: TriplaneSet, points) -> Tensor:
    return head(planes, points)


# ---------------------------------------------------------------------------
# Full decoder


class TriplaneDecoder(nn.Module):
    def __init__(self, cfg, rng):
        self.up = PlaneUpStack(cfg.latent_channels, cfg.decode_channels,
                               cfg.latent_res, cfg.decode_res, rng)
        self.fields = FieldHeads(cfg.decode_channels, rng)
        self.color = ColorHead(cfg.decode_channels, rng)
        self.grid_size = cfg.grid_size

    def forward(self, latent: TriplaneSet) -> TriplaneSet:
        return self.up(latent)

    def field(self, planes: TriplaneSet, grid_size=None) -> FlexiField:
        return self.fields(planes, self.grid_size if grid_size is None else grid_size)

    def colors_at(self, planes: TriplaneSet, points) -> Tensor:
        return self.color(planes, points)

    def sdf_at(self, planes: TriplaneSet, points) -> Tensor:
        return self.fields.sdf_at(planes, points)
