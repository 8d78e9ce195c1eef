"""Differentiable dual marching cubes and surface sampling."""

import numpy as np
import pytest

from tricodec import rng as rng_mod
from tricodec.decoder import FlexiField, grid_vertices
from tricodec.errors import ShapeError
from tricodec.isosurface import (
    SurfaceMesh,
    edge_face_counts,
    euler_characteristic,
    extract_mesh,
    is_watertight,
    surface_samples,
    undirected_edges,
)
from tricodec.tensor.core import Tensor

rng = np.random.default_rng(23)


def make_field(g, sdf_fn, weight=None, deform=None):
    pos = grid_vertices(g)
    n = pos.shape[0]
    sdf = np.asarray([sdf_fn(p) for p in pos])
    w = np.ones(n) if weight is None else np.full(n, weight)
    d = np.zeros((n, 3)) if deform is None else deform
    return FlexiField(sdf=Tensor(sdf, requires_grad=True),
                      weight=Tensor(w, requires_grad=True),
                      deform=Tensor(d, requires_grad=True), grid_size=g)


def sphere_field(g=16, r=0.6):
    return make_field(g, lambda p: np.linalg.norm(p) - r)


# ---------------------------------------------------------------------------
# extraction correctness


def test_sphere_mesh_is_watertight_genus_zero():
    mesh = extract_mesh(sphere_field())
    assert mesh.num_faces > 0
    assert is_watertight(mesh)
    assert euler_characteristic(mesh) == 2


def test_sphere_vertices_near_true_radius():
    g, r = 16, 0.6
    mesh = extract_mesh(sphere_field(g, r))
    radii = np.linalg.norm(mesh.vertices.data, axis=1)
    cell = 2.0 / g
    assert np.abs(radii - r).max() <= 1.5 * cell


def test_all_positive_field_yields_empty_mesh():
    mesh = extract_mesh(make_field(8, lambda p: 0.5))
    assert mesh.is_empty
    assert mesh.num_vertices == 0
    assert not is_watertight(mesh)
    assert euler_characteristic(mesh) == 0


def test_planar_field_reconstructs_the_plane_exactly():
    # linear field: crossing points sit exactly on the zero set, and dual
    # vertices are averages of coplanar points
    mesh = extract_mesh(make_field(16, lambda p: p[2] - 0.1))
    assert mesh.num_faces > 0
    np.testing.assert_allclose(mesh.vertices.data[:, 2], 0.1, atol=1e-6)


def test_face_indices_valid_and_distinct():
    mesh = extract_mesh(sphere_field(12, 0.55))
    assert mesh.faces.min() >= 0
    assert mesh.faces.max() < mesh.num_vertices
    assert (np.diff(np.sort(mesh.faces, axis=1), axis=1) > 0).all()


def test_faces_wind_outward_on_sphere():
    mesh = extract_mesh(sphere_field())
    v = mesh.vertices.data
    tri = v[mesh.faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    centroids = tri.mean(axis=1)
    assert ((normals * centroids).sum(axis=1) > 0).all()


def test_uniform_weight_scaling_leaves_vertices_unchanged():
    g = 10
    base = extract_mesh(sphere_field(g)).vertices.data
    scaled = extract_mesh(make_field(g, lambda p: np.linalg.norm(p) - 0.6,
                                     weight=3.7)).vertices.data
    np.testing.assert_allclose(scaled, base, atol=1e-12)


def test_deformation_moves_crossings_along_edges():
    g = 8
    plain = extract_mesh(sphere_field(g))
    d = 0.04 * rng.standard_normal((grid_vertices(g).shape[0], 3))
    bent = extract_mesh(make_field(g, lambda p: np.linalg.norm(p) - 0.6,
                                   deform=d))
    assert bent.num_faces == plain.num_faces  # same frozen topology
    assert np.abs(bent.vertices.data - plain.vertices.data).max() > 1e-4


# ---------------------------------------------------------------------------
# gradients through a frozen topology


def _loss_through_mesh(field):
    mesh = extract_mesh(field)
    probe = np.sin(np.arange(mesh.num_vertices * 3)).reshape(-1, 3)
    return (mesh.vertices * probe).sum(), mesh


def test_finite_differences_match_sdf_gradient():
    field = sphere_field(6, 0.55)
    loss, _ = _loss_through_mesh(field)
    loss.backward()
    grad = field.sdf.grad.copy()
    idx = np.argsort(np.abs(grad))[-5:]  # strongest entries, far from zero set
    for i in idx:
        eps = 1e-6
        up = field.sdf.data.copy()
        up[i] += eps
        dn = field.sdf.data.copy()
        dn[i] -= eps
        f_up, _ = _loss_through_mesh(
            FlexiField(Tensor(up), field.weight.detach(), field.deform.detach(), 6))
        f_dn, _ = _loss_through_mesh(
            FlexiField(Tensor(dn), field.weight.detach(), field.deform.detach(), 6))
        fd = (f_up.item() - f_dn.item()) / (2 * eps)
        assert fd == pytest.approx(grad[i], rel=1e-4, abs=1e-8)


def test_finite_differences_match_weight_and_deform_gradients():
    g = 6
    field = sphere_field(g, 0.55)
    loss, _ = _loss_through_mesh(field)
    loss.backward()
    for name in ("weight", "deform"):
        t = getattr(field, name)
        grad = t.grad.copy()
        flat = np.argsort(np.abs(grad).ravel())[-4:]
        for fi in flat:
            eps = 1e-6
            up = t.data.copy().ravel()
            up[fi] += eps
            dn = t.data.copy().ravel()
            dn[fi] -= eps
            kw = dict(sdf=field.sdf.detach(), weight=field.weight.detach(),
                      deform=field.deform.detach(), grid_size=g)
            kw[name] = Tensor(up.reshape(t.shape))
            f_up, _ = _loss_through_mesh(FlexiField(**kw))
            kw[name] = Tensor(dn.reshape(t.shape))
            f_dn, _ = _loss_through_mesh(FlexiField(**kw))
            fd = (f_up.item() - f_dn.item()) / (2 * eps)
            assert fd == pytest.approx(grad.ravel()[fi], rel=1e-4, abs=1e-8)


# ---------------------------------------------------------------------------
# surface sampling


def _two_triangle_mesh(area_ratio=4.0):
    s = np.sqrt(area_ratio)
    verts = np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],  # area 1/2
        [2.0, 0.0, 0.0], [2.0 + s, 0.0, 0.0], [2.0, s, 0.0],  # area_ratio/2
    ])
    faces = np.array([[0, 1, 2], [3, 4, 5]], np.int64)
    return SurfaceMesh(Tensor(verts), faces)


def test_samples_lie_on_their_faces():
    mesh = extract_mesh(sphere_field(8))
    s = surface_samples(mesh, 200, rng_mod.stream(0, "samp"))
    assert s.barycentrics.min() >= 0
    np.testing.assert_allclose(s.barycentrics.sum(axis=1), 1.0, atol=1e-12)
    tri = mesh.vertices.data[mesh.faces[s.face_ids]]
    recon = (tri * s.barycentrics[:, :, None]).sum(axis=1)
    np.testing.assert_allclose(s.points.data, recon, atol=1e-12)


def test_sampling_is_area_weighted():
    ratio = 4.0
    mesh = _two_triangle_mesh(ratio)
    k = 4000
    s = surface_samples(mesh, k, rng_mod.stream(1, "samp"))
    p_small = 1.0 / (1.0 + ratio)
    got = (s.face_ids == 0).sum()
    sigma = np.sqrt(k * p_small * (1 - p_small))
    assert abs(got - k * p_small) <= 3 * sigma


def test_sample_mean_approaches_face_centroid():
    verts = np.array([[0.0, 0, 0], [3.0, 0, 0], [0.0, 3, 0]])
    mesh = SurfaceMesh(Tensor(verts), np.array([[0, 1, 2]], np.int64))
    s = surface_samples(mesh, 20000, rng_mod.stream(2, "samp"))
    np.testing.assert_allclose(s.points.data.mean(axis=0), verts.mean(axis=0),
                               atol=0.05)


def test_sampling_empty_mesh_raises():
    empty = extract_mesh(make_field(6, lambda p: 1.0))
    with pytest.raises(ShapeError):
        surface_samples(empty, 10, rng_mod.stream(3, "samp"))


def test_samples_deterministic_for_fixed_stream():
    mesh = extract_mesh(sphere_field(8))
    a = surface_samples(mesh, 50, rng_mod.stream(4, "samp"))
    b = surface_samples(mesh, 50, rng_mod.stream(4, "samp"))
    np.testing.assert_allclose(a.points.data, b.points.data, atol=0)
    assert (a.face_ids == b.face_ids).all()


def test_sample_gradient_flows_to_vertices():
    field = sphere_field(6)
    mesh = extract_mesh(field)
    s = surface_samples(mesh, 64, rng_mod.stream(5, "samp"))
    s.points.sum().backward()
    assert np.abs(field.sdf.grad).sum() > 0


# ---------------------------------------------------------------------------
# topology helpers


def test_edge_helpers_on_single_triangle():
    faces = np.array([[0, 1, 2]], np.int64)
    e = undirected_edges(faces)
    assert e.shape == (3, 2)
    _, counts = edge_face_counts(faces)
    assert (counts == 1).all()
    tri = SurfaceMesh(Tensor(np.eye(3)), faces)
    assert not is_watertight(tri)
    assert euler_characteristic(tri) == 1  # 3 - 3 + 1
