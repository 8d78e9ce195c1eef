"""Procedural shape specs: analytic SDFs, exact surface sampling, colors.

Every primitive ships a signed distance function (negative inside) and an
exact surface sampler, so ground-truth meshes, point clouds, and render
targets can all be produced without any learned component.  Colors are a
smooth two-tone blend along a per-shape gradient axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import rng as rng_mod
from .errors import ShapeError

PRIMITIVES = ("sphere", "box", "torus", "capsule", "union2")

# one-hot slot 5 + sizes 6 + color 9 + padding = 32-entry descriptor
DESCRIPTOR_DIM = 32


@dataclass
class ShapeSpec:
    primitive: str
    sizes: tuple  # meaning depends on the primitive, up to 6 entries
    color_axis: np.ndarray  # unit 3-vector for the two-tone gradient
    color_a: np.ndarray  # rgb in [0,1] at the negative end
    color_b: np.ndarray  # rgb at the positive end
    seed: int = 0

    def __post_init__(self):
        if self.primitive not in PRIMITIVES:
            raise ShapeError(f"unknown primitive {self.primitive!r}")
        self.sizes = tuple(float(s) for s in self.sizes)
        if len(self.sizes) > 6:
            raise ShapeError("at most 6 size parameters")
        ax = np.asarray(self.color_axis, np.float64).reshape(3)
        n = np.linalg.norm(ax)
        if n == 0:
            raise ShapeError("color axis must be nonzero")
        self.color_axis = ax / n
        self.color_a = np.clip(np.asarray(self.color_a, np.float64).reshape(3), 0, 1)
        self.color_b = np.clip(np.asarray(self.color_b, np.float64).reshape(3), 0, 1)

    # -- signed distance -----------------------------------------------------

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, np.float64).reshape(-1, 3)
        return _SDF[self.primitive](p, self.sizes)

    # -- exact surface sampling ----------------------------------------------

    def sample_surface(self, k: int, rng: np.random.Generator) -> np.ndarray:
        if k < 1:
            raise ShapeError("need k >= 1 surface samples")
        return _SAMPLE[self.primitive](k, self.sizes, rng)

    def colors(self, points: np.ndarray) -> np.ndarray:
        """Two-tone blend by position along the gradient axis."""
        p = np.asarray(points, np.float64).reshape(-1, 3)
        s = p @ self.color_axis
        lo, hi = -1.0, 1.0
        t = np.clip((s - lo) / (hi - lo), 0.0, 1.0)[:, None]
        return (1.0 - t) * self.color_a[None, :] + t * self.color_b[None, :]

    # -- 32-entry analytic descriptor ----------------------------------------

    def descriptor(self) -> np.ndarray:
        d = np.zeros(DESCRIPTOR_DIM)
        d[PRIMITIVES.index(self.primitive)] = 1.0
        sz = np.asarray(self.sizes)
        d[5:5 + sz.size] = sz
        d[11:14] = self.color_axis
        d[14:17] = self.color_a
        d[17:20] = self.color_b
        return d


# ---------------------------------------------------------------------------
# SDFs (vectorized over [M,3])


def _sdf_sphere(p, sizes):
    (r,) = sizes[:1]
    return np.linalg.norm(p, axis=1) - r


def _sdf_box(p, sizes):
    h = np.asarray(sizes[:3])
    q = np.abs(p) - h[None, :]
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _sdf_torus(p, sizes):
    rmaj, rmin = sizes[:2]
    ring = np.hypot(p[:, 0], p[:, 1]) - rmaj
    return np.hypot(ring, p[:, 2]) - rmin


def _sdf_capsule(p, sizes):
    r, h = sizes[:2]  # radius, half-length of the core segment (z axis)
    z = np.clip(p[:, 2], -h, h)
    d = p.copy()
    d[:, 2] -= z
    return np.linalg.norm(d, axis=1) - r


def _union2_parts(sizes):
    r1, r2, off = sizes[:3]
    return r1, r2, off


def _sdf_union2(p, sizes):
    r1, r2, off = _union2_parts(sizes)
    a = p.copy()
    a[:, 0] += off
    b = p.copy()
    b[:, 0] -= off
    return np.minimum(np.linalg.norm(a, axis=1) - r1,
                      np.linalg.norm(b, axis=1) - r2)


_SDF = {
    "sphere": _sdf_sphere,
    "box": _sdf_box,
    "torus": _sdf_torus,
    "capsule": _sdf_capsule,
    "union2": _sdf_union2,
}


# ---------------------------------------------------------------------------
# Exact surface samplers


def _unit_dirs(k, rng):
    z = 1.0 - 2.0 * rng.random(k)
    phi = 2.0 * math.pi * rng.random(k)
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def _sample_sphere(k, sizes, rng):
    (r,) = sizes[:1]
    return r * _unit_dirs(k, rng)


def _sample_box(k, sizes, rng):
    h = np.asarray(sizes[:3])
    # pick one of six faces with probability proportional to its area
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2],
                      h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, size=k, p=areas / areas.sum())
    u = (2.0 * rng.random(k) - 1.0)
    v = (2.0 * rng.random(k) - 1.0)
    pts = np.empty((k, 3))
    axis = face // 2  # which coordinate is pinned
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        m = axis == a
        b, c = (a + 1) % 3, (a + 2) % 3
        pts[m, a] = sign[m] * h[a]
        pts[m, b] = u[m] * h[b]
        pts[m, c] = v[m] * h[c]
    return pts


def _sample_torus(k, sizes, rng):
    rmaj, rmin = sizes[:2]
    out = np.empty((k, 3))
    filled = 0
    while filled < k:
        n = 2 * (k - filled) + 16
        theta = 2.0 * math.pi * rng.random(n)
        phi = 2.0 * math.pi * rng.random(n)
        # area element scales with the distance from the tube center line
        accept = rng.random(n) < (rmaj + rmin * np.cos(phi)) / (rmaj + rmin)
        theta, phi = theta[accept], phi[accept]
        take = min(theta.size, k - filled)
        ring = rmaj + rmin * np.cos(phi[:take])
        out[filled:filled + take, 0] = ring * np.cos(theta[:take])
        out[filled:filled + take, 1] = ring * np.sin(theta[:take])
        out[filled:filled + take, 2] = rmin * np.sin(phi[:take])
        filled += take
    return out


def _sample_capsule(k, sizes, rng):
    r, h = sizes[:2]
    side = 2.0 * math.pi * r * (2.0 * h)
    caps = 4.0 * math.pi * r * r
    pick_side = rng.random(k) < side / (side + caps)
    pts = np.empty((k, 3))
    ns = int(pick_side.sum())
    theta = 2.0 * math.pi * rng.random(ns)
    pts[pick_side, 0] = r * np.cos(theta)
    pts[pick_side, 1] = r * np.sin(theta)
    pts[pick_side, 2] = (2.0 * rng.random(ns) - 1.0) * h
    nc = k - ns
    d = _unit_dirs(nc, rng)
    cap_pts = r * d
    cap_pts[:, 2] += np.where(d[:, 2] >= 0, h, -h)  # hemisphere joins its end
    pts[~pick_side] = cap_pts
    return pts


def _sample_union2(k, sizes, rng):
    r1, r2, off = _union2_parts(sizes)
    c1 = np.array([-off, 0.0, 0.0])
    c2 = np.array([off, 0.0, 0.0])
    a1, a2 = r1 * r1, r2 * r2  # sphere areas up to 4*pi
    out = np.empty((k, 3))
    filled = 0
    while filled < k:
        n = 2 * (k - filled) + 16
        first = rng.random(n) < a1 / (a1 + a2)
        d = _unit_dirs(n, rng)
        cand = np.where(first[:, None], c1[None] + r1 * d, c2[None] + r2 * d)
        other = np.where(first,
                         np.linalg.norm(cand - c2[None], axis=1) - r2,
                         np.linalg.norm(cand - c1[None], axis=1) - r1)
        keep = cand[other > 1e-12]  # drop points swallowed by the other sphere
        take = min(keep.shape[0], k - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


_SAMPLE = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "torus": _sample_torus,
    "capsule": _sample_capsule,
    "union2": _sample_union2,
}


# ---------------------------------------------------------------------------
# Deterministic random spec family


def random_spec(index: int, seed: int) -> ShapeSpec:
    """Spec #index of the seeded family; sizes keep the shape inside [-0.9, 0.9]^3."""
    g = rng_mod.substream(seed, "shape-spec", index)
    prim = PRIMITIVES[index % len(PRIMITIVES)]
    if prim == "sphere":
        sizes = (0.4 + 0.4 * g.random(),)
    elif prim == "box":
        sizes = tuple(0.3 + 0.4 * g.random(3))
    elif prim == "torus":
        sizes = (0.4 + 0.2 * g.random(), 0.12 + 0.13 * g.random())
    elif prim == "capsule":
        sizes = (0.15 + 0.15 * g.random(), 0.25 + 0.25 * g.random())
    else:
        sizes = (0.3 + 0.2 * g.random(), 0.3 + 0.2 * g.random(),
                 0.2 + 0.15 * g.random())
    axis = g.standard_normal(3)
    hue_a = 0.15 + 0.7 * g.random(3)
    hue_b = 0.15 + 0.7 * g.random(3)
    return ShapeSpec(primitive=prim, sizes=sizes, color_axis=axis,
                     color_a=hue_a, color_b=hue_b, seed=seed * 100003 + index)
