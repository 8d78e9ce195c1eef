"""Windowed cross-attention from triplane latents into a feature volume.

Each latent plane cell queries only the volume sub-block that projects onto
it: an m x m window over the plane's two axes (m = round(volume res / latent
res), start indices rounded and clamped at the boundary) and the full extent
of the third axis.  Keys and values come from per-voxel projections of the
downsampled volume with a learned position embedding; the attention output
is added to the latents residually.

Everything here follows the cyclic plane convention of
:class:`tricodec.encoder.TriplaneSet`: plane k spans axes (a_k, a_{k+1})
with (a_0, a_1, a_2) = (x, y, z), and the remaining axis a_{k+2} is the one
a query attends over in full.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import TriplaneSet, _volume_to_5d
from .errors import ShapeError
from .tensor import core, nn
from .tensor.core import Tensor


@dataclass(frozen=True)
class AttentionGeometry:
    res_lat: int  # latent plane resolution (queries per plane axis)
    res_vol: int  # downsampled volume resolution
    m: int  # window extent per plane axis
    head_dim: int
    value_channels: int

    @classmethod
    def derive(cls, res_lat: int, res_vol: int, head_dim: int, value_channels: int):
        if res_lat < 1 or res_vol < 1:
            raise ShapeError(f"invalid attention geometry: lat {res_lat}, vol {res_vol}")
        m = max(1, int(np.round(res_vol / res_lat)))
        return cls(res_lat, res_vol, m, head_dim, value_channels)

    def window_starts(self) -> np.ndarray:
        """Window start index per query row/column, rounded then clamped."""
        ideal = np.round(np.arange(self.res_lat) * (self.res_vol / self.res_lat))
        return np.clip(ideal.astype(np.int64), 0, max(self.res_vol - self.m, 0))

    @property
    def tokens_per_query(self) -> int:
        return self.m * self.m * self.res_vol


def window_token_indices(geom: AttentionGeometry) -> np.ndarray:
    """Flat voxel ids attended by each query: [3, R, R, m*m*res_vol].

    Voxels are flattened as x*r^2 + y*r + z.  Plane k's query (i, j) windows
    axes (a_k, a_{k+1}) and runs over all of a_{k+2}.
    """
    r = geom.res_vol
    starts = geom.window_starts()
    du = np.arange(geom.m)
    w_all = np.arange(r)
    # window coordinates per query index pair, in plane-local (u, v, w) axes
    u = (starts[:, None] + du[None, :])  # [R, m]
    out = np.empty((3, geom.res_lat, geom.res_lat, geom.tokens_per_query), np.int64)
    for k in range(3):
        # (u, v, w) hold values of axes (a_k, a_{k+1}, a_{k+2}); re-order to xyz
        uu = u[:, None, :, None, None]  # [R,1,m,1,1]
        vv = u[None, :, None, :, None]  # [1,R,1,m,1]
        ww = np.broadcast_to(w_all[None, None, None, None, :], (1, 1, 1, 1, r))
        axes_vals = [uu, vv, ww]
        # axis a_{(k + t) % 3} carries axes_vals[t]; find xyz components
        comp = [None, None, None]
        for t in range(3):
            comp[(k + t) % 3] = axes_vals[t]
        flat = (comp[0] * r + comp[1]) * r + comp[2]
        out[k] = np.broadcast_to(
            flat, (geom.res_lat, geom.res_lat, geom.m, geom.m, r)
        ).reshape(geom.res_lat, geom.res_lat, -1)
    return out


def windowed_cross_attention(q: TriplaneSet, k: Tensor, v: Tensor,
                             geom: AttentionGeometry) -> TriplaneSet:
    """Per-query softmax attention over each query's window tokens.

    q: latent planes with head_dim channels; k: [res_vol^3, head_dim];
    v: [res_vol^3, value_channels].  Returns planes of value_channels.
    """
    if q.resolution != geom.res_lat or q.channels != geom.head_dim:
        raise ShapeError(
            f"query planes {tuple(q.stack.shape)} do not match geometry "
            f"(res {geom.res_lat}, head_dim {geom.head_dim})"
        )
    n_vox = geom.res_vol**3
    if k.shape != (n_vox, geom.head_dim) or v.shape != (n_vox, geom.value_channels):
        raise ShapeError(
            f"keys {k.shape} / values {v.shape} do not match geometry "
            f"({n_vox} voxels, head_dim {geom.head_dim}, values {geom.value_channels})"
        )
    tok = window_token_indices(geom)
    rl, T = geom.res_lat, geom.tokens_per_query
    scale = 1.0 / np.sqrt(geom.head_dim)
    planes = []
    for pk in range(3):
        idx = tok[pk].reshape(-1)  # [R*R*T]
        kw = k[idx].reshape(rl * rl, T, geom.head_dim)
        vw = v[idx].reshape(rl * rl, T, geom.value_channels)
        qk = core.transpose(q.plane(pk), (1, 2, 0)).reshape(rl * rl, 1, geom.head_dim)
        scores = core.matmul(qk, core.transpose(kw, (0, 2, 1))) * scale  # [RR,1,T]
        attn = core.softmax(scores, axis=-1)
        out = core.matmul(attn, vw).reshape(rl, rl, geom.value_channels)
        planes.append(core.transpose(out, (2, 0, 1)))
    return TriplaneSet(core.stack(planes, axis=0))


def enhance_latent(latents: TriplaneSet, residual: TriplaneSet) -> TriplaneSet:
    if latents.stack.shape != residual.stack.shape:
        raise ShapeError(
            f"latents {tuple(latents.stack.shape)} and attention residual "
            f"{tuple(residual.stack.shape)} differ in shape"
        )
    return TriplaneSet(latents.stack + residual.stack)


class TriConv(nn.Module):
    """Plane convolution that mixes the three planes first.

    Each plane is concatenated with the other two planes' features reduced
    along their axis not shared with this plane and broadcast back over the
    plane grid; one shared 2D convolution then maps the 3c channels to the
    output.  With the cyclic layout this reduction is: next plane -> mean
    over its columns (a row-profile over this plane's columns), previous
    plane -> mean over its rows (a profile over this plane's rows).
    """

    def __init__(self, in_ch: int, out_ch: int, kernel, rng, padding=0):
        self.conv = nn.Conv2d(3 * in_ch, out_ch, kernel, rng, padding=padding)

    def forward(self, planes: TriplaneSet) -> TriplaneSet:
        s = planes.stack  # [3,C,R,R]
        R = planes.resolution
        nxt = s[[1, 2, 0]]
        prv = s[[2, 0, 1]]
        # function of the next plane's rows = this plane's columns
        from_next = core.broadcast_to(
            core.transpose(nxt.mean(axis=3, keepdims=True), (0, 1, 3, 2)), tuple(s.shape)
        )
        # function of the previous plane's columns = this plane's rows
        from_prev = core.broadcast_to(
            core.transpose(prv.mean(axis=2, keepdims=True), (0, 1, 3, 2)), tuple(s.shape)
        )
        mixed = core.concat([s, from_next, from_prev], axis=1)
        return TriplaneSet(self.conv(mixed))


class VolumeDownsampler(nn.Module):
    """One learned 3D conv with kernel = stride = (o,o,o)."""

    def __init__(self, channels_in: int, channels_out: int, factor: int, rng):
        self.factor = factor
        self.conv = nn.Conv3d(channels_in, channels_out, factor, rng, stride=factor)

    def forward(self, grid: Tensor) -> Tensor:
        """[r,r,r,c] -> [r/o, r/o, r/o, c_out], channels last."""
        r = grid.shape[0]
        if r % self.factor:
            raise ShapeError(f"volume res {r} not divisible by factor {self.factor}")
        y = self.conv(_volume_to_5d(grid))  # [1, c_out, r', r', r']
        return core.transpose(y[0], (1, 2, 3, 0))


def downsample_volume(down: VolumeDownsampler, grid: Tensor) -> Tensor:
    return down(grid)


class AttentionQKV(nn.Module):
    """Q via a 1x1 TriConv on the latents; K/V via per-voxel affine maps
    of the downsampled volume after adding a learned position embedding."""

    def __init__(self, latent_channels: int, volume_channels: int, res_vol: int,
                 head_dim: int, rng):
        self.q_proj = TriConv(latent_channels, head_dim, 1, rng)
        self.pos_embed = core.parameter(
            rng.normal(0.0, 0.02, (res_vol, res_vol, res_vol, volume_channels))
        )
        self.k_proj = nn.Linear(volume_channels, head_dim, rng)
        self.v_proj = nn.Linear(volume_channels, latent_channels, rng)

    def forward(self, latents: TriplaneSet, vol_grid: Tensor):
        if tuple(vol_grid.shape) != tuple(self.pos_embed.shape):
            raise ShapeError(
                f"downsampled volume {tuple(vol_grid.shape)} does not match "
                f"position table {tuple(self.pos_embed.shape)}"
            )
        q = self.q_proj(latents)
        voxels = (vol_grid + self.pos_embed).reshape(-1, vol_grid.shape[3])
        return q, self.k_proj(voxels), self.v_proj(voxels)


def make_qkv(qkv: AttentionQKV, latents: TriplaneSet, vol_grid: Tensor):
    return qkv(latents, vol_grid)


class LatentEnhancer(nn.Module):
    """Downsample the feature volume, cross-attend, add residually."""

    def __init__(self, latent_res: int, latent_channels: int, volume_res: int,
                 volume_channels: int, downsample_factor: int, head_dim: int, rng):
        if volume_res % downsample_factor:
            raise ShapeError(
                f"volume res {volume_res} not divisible by factor {downsample_factor}"
            )
        res_vol = volume_res // downsample_factor
        self.geom = AttentionGeometry.derive(latent_res, res_vol, head_dim, latent_channels)
        self.down = VolumeDownsampler(volume_channels, volume_channels, downsample_factor, rng)
        self.qkv = AttentionQKV(latent_channels, volume_channels, res_vol, head_dim, rng)

    def forward(self, latents: TriplaneSet, normalized_grid: Tensor) -> TriplaneSet:
        vol = self.down(normalized_grid)
        q, k, v = self.qkv(latents, vol)
        residual = windowed_cross_attention(q, k, v, self.geom)
        return enhance_latent(latents, residual)
