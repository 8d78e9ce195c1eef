"""Software rasterizer with attribute gradients, plus the training loss.

The pixel-to-triangle assignment is computed by a frozen z-buffer kernel and
treated as a constant; barycentric weights, interpolated colors, and depths
are then re-evaluated on the autodiff graph at the covered pixels, so
gradients reach vertex positions and vertex colors but not the silhouette
boundary itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng as rng_mod
from .backend import use_numba
from .encoder import LatentDistribution
from .errors import ShapeError
from .isosurface import SurfaceMesh
from .tensor import core, ops
from .tensor.core import Tensor, astensor, no_grad
from .tensor.kernels import raster_assign_nb, raster_assign_np


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    fov_y: float = 60.0
    height: int = 64
    width: int = 64
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        self.position = np.asarray(self.position, np.float64).reshape(3)
        self.look_at = np.asarray(self.look_at, np.float64).reshape(3)
        self.up = np.asarray(self.up, np.float64).reshape(3)
        if not (self.near < self.far):
            raise ShapeError(f"camera near {self.near} must be < far {self.far}")
        if not (0.0 < self.fov_y < 180.0):
            raise ShapeError(f"camera fov_y {self.fov_y} outside (0, 180)")
        if self.height < 1 or self.width < 1:
            raise ShapeError("camera image size must be >= 1x1")

    def axes(self):
        """Orthonormal (right, up, forward) rows; forward points at the scene."""
        fwd = self.look_at - self.position
        norm = np.linalg.norm(fwd)
        if norm == 0:
            raise ShapeError("camera position coincides with look_at")
        fwd = fwd / norm
        right = np.cross(fwd, self.up)
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise ShapeError("camera up vector is parallel to the view direction")
        right = right / rn
        up = np.cross(right, fwd)
        return right, up, fwd


@dataclass
class RenderTarget:
    rgb: Tensor  # [H,W,3]
    mask: Tensor  # [H,W], 1 where covered
    depth: Tensor  # [H,W], camera-space z / far, 0 where empty

    @property
    def image_size(self):
        return self.rgb.shape[0], self.rgb.shape[1]

    def detach(self) -> "RenderTarget":
        return RenderTarget(Tensor(self.rgb.data.copy()),
                            Tensor(self.mask.data.copy()),
                            Tensor(self.depth.data.copy()))


def _background(cam: Camera) -> RenderTarget:
    h, w = cam.height, cam.width
    return RenderTarget(Tensor(np.zeros((h, w, 3))), Tensor(np.zeros((h, w))),
                        Tensor(np.zeros((h, w))))


def _project(vertices: Tensor, cam: Camera):
    """Screen-space xy (pixel centers at integers) and camera depth, on-graph."""
    right, up, fwd = cam.axes()
    rot = Tensor(np.stack([right, up, fwd], axis=1))  # columns: view basis
    rel = vertices - Tensor(cam.position.reshape(1, 3))
    view = rel @ rot  # [M,3] -> (x right, y up, z forward)
    vx, vy, vz = view[:, 0], view[:, 1], view[:, 2]
    # clamp depth for the projective divide only; faces with any vertex in
    # front of the near plane are culled by the assignment kernel anyway,
    # and the clamp keeps their gradients finite instead of NaN-poisoning
    vz_safe = core.clamp(vz, lo=cam.near)
    tan_half = math.tan(math.radians(cam.fov_y) * 0.5)
    aspect = cam.width / cam.height
    ndc_x = vx / (vz_safe * tan_half * aspect)
    ndc_y = vy / (vz_safe * tan_half)
    sx = (ndc_x + 1.0) * (0.5 * cam.width) - 0.5
    sy = (1.0 - (ndc_y + 1.0) * 0.5) * cam.height - 0.5
    return sx, sy, vz


def project_points(points, cam: Camera):
    """Off-graph projection of [M,3] points: pixel-space x, y and camera depth."""
    with no_grad():
        sx, sy, vz = _project(astensor(np.asarray(points, np.float64)), cam)
    return sx.data, sy.data, vz.data


def rasterize(mesh: SurfaceMesh, colors, cam: Camera) -> RenderTarget:
    """Render a triangle mesh with per-vertex colors into rgb/mask/depth.

    colors: [M,3] per-vertex values in [0,1]; falls back to mesh.vertex_colors.
    """
    if colors is None:
        colors = mesh.vertex_colors
    if mesh.is_empty:
        return _background(cam)
    colors = astensor(colors)
    if colors.shape != (mesh.num_vertices, 3):
        raise ShapeError(
            f"colors shape {colors.shape} does not match {mesh.num_vertices} vertices")

    sx, sy, vz = _project(mesh.vertices, cam)
    xy = np.stack([sx.data, sy.data], axis=1)
    assign = raster_assign_nb if use_numba() else raster_assign_np
    tri_id, _ = assign(xy, vz.data, mesh.faces, cam.height, cam.width,
                       cam.near, cam.far)

    py, px = np.nonzero(tri_id >= 0)
    if py.size == 0:
        return _background(cam)
    fids = tri_id[py, px]
    i0, i1, i2 = (mesh.faces[fids, k] for k in range(3))
    pxf = px.astype(np.float64)
    pyf = py.astype(np.float64)

    # differentiable barycentrics under the frozen assignment
    x0, y0 = sx[i0], sy[i0]
    x1, y1 = sx[i1], sy[i1]
    x2, y2 = sx[i2], sy[i2]
    w0 = (x1 - pxf) * (y2 - pyf) - (x2 - pxf) * (y1 - pyf)
    w1 = (x2 - pxf) * (y0 - pyf) - (x0 - pxf) * (y2 - pyf)
    w2 = (x0 - pxf) * (y1 - pyf) - (x1 - pxf) * (y0 - pyf)
    wsum = w0 + w1 + w2  # equals the signed triangle area
    b0, b1, b2 = w0 / wsum, w1 / wsum, w2 / wsum

    zpix = b0 * vz[i0] + b1 * vz[i1] + b2 * vz[i2]
    rgbpix = (colors[i0] * b0.reshape(-1, 1) + colors[i1] * b1.reshape(-1, 1)
              + colors[i2] * b2.reshape(-1, 1))
    maskpix = b0 + b1 + b2  # identically 1, kept on-graph

    h, w = cam.height, cam.width
    flat = (py * w + px).astype(np.int64)
    rgb = ops.scatter_add((h * w, 3), flat, rgbpix).reshape(h, w, 3)
    mask = ops.scatter_add((h * w,), flat, maskpix).reshape(h, w)
    depth = ops.scatter_add((h * w,), flat, zpix * (1.0 / cam.far)).reshape(h, w)
    return RenderTarget(rgb=rgb, mask=mask, depth=depth)


@dataclass
class LossWeights:
    rgb: float = 10.0
    mask: float = 10.0
    depth: float = 0.1
    kl: float = 1e-6


def rendering_loss(pred: RenderTarget, gt: RenderTarget,
                   dist: LatentDistribution | None,
                   weights: LossWeights = LossWeights()):
    """Weighted image reconstruction loss plus a latent regularizer.

    Returns (total, components) where components maps each term name to its
    unweighted float value.  The depth term averages over pixels covered in
    both images; rgb and mask average over the full frame.
    """
    if pred.rgb.shape != gt.rgb.shape or pred.mask.shape != gt.mask.shape \
            or pred.depth.shape != gt.depth.shape:
        raise ShapeError(
            f"render target sizes differ: pred {pred.rgb.shape} vs gt {gt.rgb.shape}")

    l_rgb = ops.mse_loss(pred.rgb, gt.rgb)
    l_mask = ops.mse_loss(pred.mask, gt.mask)

    joint = (pred.mask.data > 0.5) & (gt.mask.data > 0.5)
    iy, ix = np.nonzero(joint)
    if iy.size:
        dd = pred.depth[iy, ix] - gt.depth[iy, ix]
        l_depth = (dd * dd).sum() * (1.0 / iy.size)
    else:
        l_depth = Tensor(np.zeros(()))

    total = weights.rgb * l_rgb + weights.mask * l_mask + weights.depth * l_depth
    comps = {"rgb": l_rgb.item(), "mask": l_mask.item(), "depth": l_depth.item()}
    if dist is not None:
        kl = dist.kl()
        total = total + weights.kl * kl
        comps["kl"] = kl.item()
    else:
        comps["kl"] = 0.0
    comps["total"] = total.item()
    return total, comps


def make_view_set(n: int, seed: int, radius: float = 3.0, fov_y: float = 60.0,
                  height: int = 64, width: int = 64, near: float = 0.1,
                  far: float = 10.0) -> list:
    """n cameras at uniformly random directions on a sphere, looking at origin."""
    if n < 1:
        raise ShapeError("view set needs n >= 1")
    gen = rng_mod.stream(seed, "view-set")
    cams = []
    for _ in range(n):
        zc = 1.0 - 2.0 * gen.random()
        phi = 2.0 * math.pi * gen.random()
        s = math.sqrt(max(0.0, 1.0 - zc * zc))
        d = np.array([s * math.cos(phi), s * math.sin(phi), zc])
        up = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.98 else np.array([0.0, 1.0, 0.0])
        cams.append(Camera(position=radius * d, look_at=np.zeros(3), up=up,
                           fov_y=fov_y, height=height, width=width,
                           near=near, far=far))
    return cams
