import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volavatar.geometry import (BehindCameraError, Camera, MeshError, ObjParseError, TriMesh, bounding_sphere,
                                chamfer_distance, closest_points_on_triangles, load_mesh, look_at, point_triangle_closest,
                                project, save_mesh, unproject)

TRI = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_single_triangle_obj(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    m = load_mesh(p)
    assert m.n_vertices == 3 and m.n_triangles == 1


def test_obj_zero_index_rejected(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
    with pytest.raises(ObjParseError):
        load_mesh(p)


def test_obj_round_trip(tmp_path, rng):
    from conftest import random_mesh
    m = random_mesh(rng, 100)
    m = TriMesh(m.vertices, m.triangles, rng.uniform(size=(m.n_vertices, 3)))
    save_mesh(m, tmp_path / "m.obj")
    back = load_mesh(tmp_path / "m.obj")
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_allclose(back.colors, m.colors, atol=1e-5)


def test_obj_quad_is_fan_triangulated(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert load_mesh(p).n_triangles == 2


def test_mesh_rejects_bad_index():
    with pytest.raises(MeshError):
        TriMesh(TRI, [[0, 1, 3]])


@pytest.mark.parametrize("p,closest,dist", [
    ((0, 0, 1), (0, 0, 0), 1.0),
    ((0.25, 0.25, 2), (0.25, 0.25, 0), 2.0),
    ((2, 0, 0), (1, 0, 0), 1.0),
])
def test_point_triangle_examples(p, closest, dist):
    c, d, _ = point_triangle_closest(np.array(p, float), TRI)
    np.testing.assert_allclose(c, closest, atol=1e-12)
    assert abs(float(d) - dist) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_closest_point_is_minimal(seed):
    r = np.random.default_rng(seed)
    tri = r.normal(size=(3, 3))
    p = r.normal(size=(1, 3)) * 2
    c, bary = closest_points_on_triangles(p, tri[None, 0], tri[None, 1], tri[None, 2])
    np.testing.assert_allclose(bary.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(bary >= -1e-12)
    # no sampled point of the triangle is closer
    w = r.dirichlet(np.ones(3), size=2000)
    d_samples = np.linalg.norm(w @ tri - p, axis=1)
    assert np.linalg.norm(c - p) <= d_samples.min() + 1e-9


def test_chamfer_examples(rng):
    assert chamfer_distance(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == pytest.approx(2.0)
    a = rng.normal(size=(50, 3))
    b = rng.normal(size=(70, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-12)


def test_projection_examples():
    cam = Camera(np.eye(4), 100.0, 100.0, 50.0, 50.0, 100, 100)
    np.testing.assert_allclose(project(cam, np.array([0.0, 0, 1])), (50, 50))
    np.testing.assert_allclose(project(cam, np.array([0.5, 0, 1])), (100, 50))
    with pytest.raises(BehindCameraError):
        project(cam, np.array([0.0, 0, -1]))


def test_unproject_inverts_project(rng):
    cam = Camera(look_at((0.3, 0.2, 2.5), (0, 0, 0)), 120.0, 110.0, 32.0, 30.0, 64, 64)
    p = rng.normal(size=(20, 3)) * 0.3
    uv = project(cam, p)
    depth = cam.world_to_camera(p)[:, 2]
    np.testing.assert_allclose(unproject(cam, uv, depth), p, atol=1e-12)


def test_look_at_keeps_up_upward():
    cam = Camera(look_at((0, 0, 3), (0, 0, 0)), 100.0, 100.0, 50.0, 50.0, 100, 100)
    top, bottom = project(cam, np.array([[0, 0.5, 0], [0, -0.5, 0]]))
    assert top[1] < 50 < bottom[1]


def test_bounding_sphere_examples(rng):
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    c, r = bounding_sphere(cube)
    np.testing.assert_allclose(c, 0.5, atol=1e-9)
    assert r >= np.sqrt(3) / 2 - 1e-12
    c1, r1 = bounding_sphere(np.array([[1.0, 2, 3]]))
    assert r1 == 0.0
    pts = rng.normal(size=(200, 3))
    c2, r2 = bounding_sphere(pts)
    c3, r3 = bounding_sphere(pts + 5.0)
    np.testing.assert_allclose(c3, c2 + 5.0, atol=1e-9)
    assert r3 == pytest.approx(r2, rel=1e-9)
    assert np.all(np.linalg.norm(pts - c2, axis=1) <= r2 + 1e-12)
