import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_mesh
from volavatar import bvh
from volavatar.geometry import TriMesh, brute_force_nearest


def _walk(tree):
    seen = []
    stack = [0]
    while stack:
        n = stack.pop()
        if tree.left[n] < 0:
            seen.extend(tree.perm[tree.start[n]:tree.start[n] + tree.count[n]].tolist())
        else:
            stack += [tree.left[n], tree.right[n]]
    return seen


def test_single_triangle_is_one_leaf():
    t = bvh.build(TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]]))
    assert t.n_nodes == 1 and t.left[0] == -1 and t.count[0] == 1


def test_every_triangle_reachable_once(rng):
    t = bvh.build(random_mesh(rng, 1000))
    assert sorted(_walk(t)) == list(range(1000))


def test_rebuild_is_identical(rng):
    m = random_mesh(rng, 500)
    a, b = bvh.build(m), bvh.build(m)
    for f in ("box_min", "box_max", "left", "right", "start", "count", "perm"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_boxes_contain_children(rng):
    t = bvh.build(random_mesh(rng, 300))
    for n in range(t.n_nodes):
        if t.left[n] >= 0:
            for c in (t.left[n], t.right[n]):
                assert np.all(t.box_min[c] >= t.box_min[n]) and np.all(t.box_max[c] <= t.box_max[n])


def test_shared_vertex_tie_goes_to_lowest_index():
    # fan of 10 triangles around vertex 0; the query sits on vertex 0, shared by all
    ang = np.linspace(0, 2 * np.pi, 11)[:-1]
    verts = np.vstack([[0, 0, 0], np.stack([np.cos(ang), np.sin(ang), np.zeros(10)], 1)])
    tris = np.array([[0, 1 + i, 1 + (i + 1) % 10] for i in range(10)])
    # reorder so the lowest-index triangles containing vertex 0 are 3 and 7 in a mixed mesh
    far = np.array([[5, 5, 5], [6, 5, 5], [5, 6, 5]], float)
    verts = np.vstack([verts, far])
    soup = [[11, 12, 13]] * 3 + [tris[0]] + [[11, 12, 13]] * 3 + [tris[1]]
    m = TriMesh(verts, np.array(soup))
    h = bvh.nearest_triangle(bvh.build(m), np.zeros(3))
    assert h.distance == 0.0 and h.triangle == 3


def test_far_query_is_finite(rng):
    t = bvh.build(random_mesh(rng, 200))
    h = bvh.nearest_triangle(t, np.array([1e6, -1e6, 1e6]))
    assert 0 <= h.triangle < 200 and np.isfinite(h.distance)


def test_matches_brute_force(rng, backend):
    m = random_mesh(rng, 2000)
    q = rng.uniform(-0.3, 1.3, size=(3000, 3))
    h = bvh.nearest_triangles(bvh.build(m), q)
    idx, _, dist, _ = brute_force_nearest(m.corners(), q)
    np.testing.assert_array_equal(h.distance, dist)
    np.testing.assert_array_equal(h.triangle, idx)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 300))
def test_matches_brute_force_property(seed, n_tri):
    r = np.random.default_rng(seed)
    corners = r.normal(size=(n_tri, 3, 3))
    q = r.normal(size=(200, 3)) * 1.5
    h = bvh.nearest_triangles(bvh.build(corners), q)
    idx, _, dist, _ = brute_force_nearest(corners, q)
    np.testing.assert_array_equal(h.distance, dist)
    np.testing.assert_array_equal(h.triangle, idx)


def test_max_dist_filters(rng):
    m = random_mesh(rng, 300)
    t = bvh.build(m)
    q = rng.uniform(-1, 2, size=(500, 3))
    full = bvh.nearest_triangles(t, q)
    cut = bvh.nearest_triangles(t, q, max_dist=0.1)
    near = full.distance <= 0.1
    np.testing.assert_array_equal(cut.triangle[near], full.triangle[near])
    assert np.all(cut.triangle[~near] == -1) and np.all(np.isinf(cut.distance[~near]))


def test_distance_examples(rng):
    plane = TriMesh([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0]], [[0, 1, 2], [0, 2, 3]])
    t = bvh.build(plane)
    assert bvh.distance_to_surface(t, np.array([0.2, 0.1, 0.0])) == pytest.approx(0.0, abs=1e-12)
    assert bvh.distance_to_surface(t, np.array([0.2, 0.1, 0.37])) == pytest.approx(0.37, abs=1e-15)
    m = random_mesh(rng, 400)
    tm = bvh.build(m)
    p = rng.uniform(-0.5, 1.5, size=(1000, 3))
    np.testing.assert_array_equal(bvh.distance_to_surface(tm, p), bvh.nearest_triangles(tm, p).distance)


def test_candidate_mask_is_conservative(rng):
    m = random_mesh(rng, 400)
    t = bvh.build(m)
    o = np.tile([0.5, 0.5, 3.0], (200, 1)) + rng.normal(size=(200, 3)) * 0.2
    d = np.array([0, 0, -1.0]) + rng.normal(size=(200, 3)) * 0.2
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tn, tf = np.full(200, 1.0), np.full(200, 5.0)
    n = 64
    mask = bvh.candidate_sample_mask(t, o, d, tn, tf, 0.05, n)
    ts = tn[:, None] + (np.arange(n) + 0.5) * ((tf - tn) / n)[:, None]
    pts = o[:, None] + ts[..., None] * d[:, None]
    dist = bvh.nearest_triangles(t, pts.reshape(-1, 3)).distance.reshape(200, n)
    assert np.all(mask[dist <= 0.05])
