"""Bounding volume hierarchy over triangles for nearest-triangle queries.

Build is a deterministic median split on the longest centroid axis with at
most ``LEAF_SIZE`` triangles per leaf. Queries run either as a numba
stack traversal or as a vectorized numpy frontier traversal; both return
the same triangle (ties go to the lowest triangle index) and distances are
recomputed with :func:`geometry.point_triangle_closest` for every hit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from ._accel import njit
from .geometry import TriMesh, MeshError, _closest_scalar, point_triangle_closest

LEAF_SIZE = 4


@dataclass
class NearestHit:
    triangle: np.ndarray
    closest: np.ndarray
    distance: np.ndarray
    bary: np.ndarray

    def __getitem__(self, i):
        return NearestHit(self.triangle[i], self.closest[i], self.distance[i], self.bary[i])


@dataclass
class Bvh:
    box_min: np.ndarray  # (N, 3)
    box_max: np.ndarray  # (N, 3)
    left: np.ndarray  # (N,) child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray  # leaf range into perm
    count: np.ndarray
    perm: np.ndarray  # triangle ids in leaf order
    corners: np.ndarray  # (T, 3, 3) source triangle data

    @property
    def n_nodes(self):
        return len(self.left)

    def leaves(self):
        return np.flatnonzero(self.left < 0)


def build(mesh_or_corners) -> Bvh:
    corners = mesh_or_corners.corners() if isinstance(mesh_or_corners, TriMesh) else mesh_or_corners
    corners = np.ascontiguousarray(corners, dtype=np.float64)
    nt = len(corners)
    if nt == 0:
        raise MeshError("cannot build a BVH over an empty mesh")
    tmin = corners.min(axis=1)
    tmax = corners.max(axis=1)
    cent = corners.mean(axis=1)
    perm = np.arange(nt, dtype=np.int64)

    box_min, box_max, left, right, start, count = [], [], [], [], [], []

    def new_node(lo, hi):
        ids = perm[lo:hi]
        box_min.append(tmin[ids].min(axis=0))
        box_max.append(tmax[ids].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(lo)
        count.append(hi - lo)
        return len(left) - 1

    root = new_node(0, nt)
    stack = [(root, 0, nt)]
    while stack:
        node, lo, hi = stack.pop()
        if hi - lo <= LEAF_SIZE:
            continue
        ids = perm[lo:hi]
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order = np.argsort(c[:, axis], kind="stable")
        perm[lo:hi] = ids[order]
        mid = lo + (hi - lo) // 2
        ln = new_node(lo, mid)
        rn = new_node(mid, hi)
        left[node], right[node] = ln, rn
        count[node] = 0
        # right pushed first so the left subtree is numbered depth-first
        stack.append((rn, mid, hi))
        stack.append((ln, lo, mid))

    return Bvh(
        np.array(box_min), np.array(box_max),
        np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
        np.array(start, dtype=np.int64), np.array(count, dtype=np.int64),
        perm, corners,
    )


# --- numba traversal -----------------------------------------------------------


@njit
def _box_dist2(px, py, pz, bmin, bmax):
    d = 0.0
    if px < bmin[0]:
        d += (bmin[0] - px) ** 2
    elif px > bmax[0]:
        d += (px - bmax[0]) ** 2
    if py < bmin[1]:
        d += (bmin[1] - py) ** 2
    elif py > bmax[1]:
        d += (py - bmax[1]) ** 2
    if pz < bmin[2]:
        d += (bmin[2] - pz) ** 2
    elif pz > bmax[2]:
        d += (pz - bmax[2]) ** 2
    return d


@njit
def _nearest_kernel(points, box_min, box_max, left, right, start, count, perm, corners, max_d2, out_tri):
    stack = np.empty(128, dtype=np.int64)
    for q in range(points.shape[0]):
        px = points[q, 0]
        py = points[q, 1]
        pz = points[q, 2]
        best = max_d2
        best_tri = -1
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            n = stack[sp]
            if _box_dist2(px, py, pz, box_min[n], box_max[n]) > best:
                continue
            if left[n] < 0:
                for k in range(start[n], start[n] + count[n]):
                    t = perm[k]
                    c = corners[t]
                    r = _closest_scalar(px, py, pz, c[0, 0], c[0, 1], c[0, 2], c[1, 0], c[1, 1], c[1, 2],
                                        c[2, 0], c[2, 1], c[2, 2])
                    dx = px - r[0]
                    dy = py - r[1]
                    dz = pz - r[2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < best or (d2 == best and (best_tri < 0 or t < best_tri)):
                        best = d2
                        best_tri = t
            else:
                a = left[n]
                b = right[n]
                da = _box_dist2(px, py, pz, box_min[a], box_max[a])
                db = _box_dist2(px, py, pz, box_min[b], box_max[b])
                # push the farther child first so the nearer one is popped next
                if da <= db:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
        out_tri[q] = best_tri


# --- numpy traversal ---------------------------------------------------------------


def _box_dist2_np(p, bmin, bmax):
    d = np.maximum(bmin - p, 0.0) + np.maximum(p - bmax, 0.0)
    return d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2


def _leaf_candidates(bvh, q, nodes, points, best, best_tri):
    """Scan the triangles of leaf ``nodes`` for queries ``q``; update in place."""
    cnt = bvh.count[nodes]
    rep_q = np.repeat(q, cnt)
    offs = np.arange(cnt.sum()) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    tri = bvh.perm[np.repeat(bvh.start[nodes], cnt) + offs]
    c = bvh.corners[tri]
    from .geometry import closest_points_on_triangles

    p = points[rep_q]
    cl, _ = closest_points_on_triangles(p, c[:, 0], c[:, 1], c[:, 2])
    d = p - cl
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    # per query: smallest d2, then smallest triangle id
    order = np.lexsort((tri, d2, rep_q))
    rq, rd, rt = rep_q[order], d2[order], tri[order]
    first = np.ones(len(rq), dtype=bool)
    first[1:] = rq[1:] != rq[:-1]
    rq, rd, rt = rq[first], rd[first], rt[first]
    better = (rd < best[rq]) | ((rd == best[rq]) & ((best_tri[rq] < 0) | (rt < best_tri[rq])))
    best[rq[better]] = rd[better]
    best_tri[rq[better]] = rt[better]


def _nearest_numpy(bvh, points, max_d2):
    nq = len(points)
    best = np.full(nq, max_d2)
    best_tri = np.full(nq, -1, dtype=np.int64)
    q_all = np.arange(nq)

    # greedy descent gives every query an initial upper bound
    node = np.zeros(nq, dtype=np.int64)
    inner = bvh.left[node] >= 0
    while np.any(inner):
        qi = q_all[inner]
        a, b = bvh.left[node[qi]], bvh.right[node[qi]]
        da = _box_dist2_np(points[qi], bvh.box_min[a], bvh.box_max[a])
        db = _box_dist2_np(points[qi], bvh.box_min[b], bvh.box_max[b])
        node[qi] = np.where(da <= db, a, b)
        inner = bvh.left[node] >= 0
    _leaf_candidates(bvh, q_all, node, points, best, best_tri)

    fq = q_all
    fn = np.zeros(nq, dtype=np.int64)
    while len(fq):
        bd = _box_dist2_np(points[fq], bvh.box_min[fn], bvh.box_max[fn])
        keep = bd <= best[fq]
        fq, fn = fq[keep], fn[keep]
        leaf = bvh.left[fn] < 0
        if np.any(leaf):
            _leaf_candidates(bvh, fq[leaf], fn[leaf], points, best, best_tri)
        fq, fn = fq[~leaf], fn[~leaf]
        fq = np.concatenate([fq, fq])
        fn = np.concatenate([bvh.left[fn], bvh.right[fn]])
    return best_tri


# --- public queries ---------------------------------------------------------------


def nearest_triangles(bvh: Bvh, points, max_dist=np.inf) -> NearestHit:
    """Batched nearest-triangle query.

    With a finite ``max_dist`` only triangles within that distance are
    considered; queries without one get triangle -1 and distance inf.
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    max_d2 = float(max_dist) ** 2 if np.isfinite(max_dist) else np.inf
    if _accel.use_numba():
        tri = np.empty(len(points), dtype=np.int64)
        _nearest_kernel(points, bvh.box_min, bvh.box_max, bvh.left, bvh.right, bvh.start, bvh.count,
                        bvh.perm, bvh.corners, max_d2, tri)
    else:
        tri = _nearest_numpy(bvh, points, max_d2)
    found = tri >= 0
    closest = np.full((len(points), 3), np.nan)
    dist = np.full(len(points), np.inf)
    bary = np.full((len(points), 3), np.nan)
    if np.any(found):
        c, d, b = point_triangle_closest(points[found], bvh.corners[tri[found]])
        closest[found], dist[found], bary[found] = c, d, b
    return NearestHit(tri, closest, dist, bary)


def nearest_triangle(bvh: Bvh, p) -> NearestHit:
    """Single-point form of :func:`nearest_triangles`."""
    return nearest_triangles(bvh, np.asarray(p, dtype=np.float64).reshape(1, 3))[0]


def distance_to_surface(bvh: Bvh, p, max_dist=np.inf):
    """Unsigned distance to the closest triangle (scalar for a single point)."""
    p = np.asarray(p, dtype=np.float64)
    d = nearest_triangles(bvh, p.reshape(-1, 3), max_dist).distance
    return float(d[0]) if p.ndim == 1 else d


# --- ray / box helpers used by the sampler -------------------------------------------


@njit
def _ray_leaf_intervals(origins, dirs, t_near, t_far, box_min, box_max, left, right, pad,
                        n_samples, out_mask):
    """Mark stratified sample slots whose stratum meets a leaf box grown by ``pad``.

    A point within ``pad`` of a triangle lies inside that triangle's bounding
    box grown by ``pad``, so unmarked slots are provably farther than ``pad``.
    """
    stack = np.empty(128, dtype=np.int64)
    for r in range(origins.shape[0]):
        tn = t_near[r]
        tf = t_far[r]
        if not tf > tn:
            continue
        step = (tf - tn) / n_samples
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            n = stack[sp]
            t0 = tn
            t1 = tf
            hit = True
            for ax in range(3):
                o = origins[r, ax]
                d = dirs[r, ax]
                lo = box_min[n, ax] - pad
                hi = box_max[n, ax] + pad
                if abs(d) < 1e-15:
                    if o < lo or o > hi:
                        hit = False
                        break
                else:
                    ta = (lo - o) / d
                    tb = (hi - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
                    if t0 > t1:
                        hit = False
                        break
            if not hit:
                continue
            if left[n] < 0:
                i0 = int(np.floor((t0 - tn) / step)) - 1
                i1 = int(np.floor((t1 - tn) / step)) + 1
                if i0 < 0:
                    i0 = 0
                if i1 > n_samples - 1:
                    i1 = n_samples - 1
                for i in range(i0, i1 + 1):
                    out_mask[r, i] = True
            else:
                stack[sp] = left[n]
                stack[sp + 1] = right[n]
                sp += 2


def candidate_sample_mask(bvh, origins, dirs, t_near, t_far, pad, n_samples):
    """Conservative mask of sample strata that may lie within ``pad`` of the mesh."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    mask = np.zeros((len(origins), n_samples), dtype=np.bool_)
    if _accel.use_numba():
        _ray_leaf_intervals(origins, dirs, np.ascontiguousarray(t_near, dtype=np.float64),
                            np.ascontiguousarray(t_far, dtype=np.float64), bvh.box_min, bvh.box_max,
                            bvh.left, bvh.right, float(pad), int(n_samples), mask)
    else:
        valid = np.asarray(t_far) > np.asarray(t_near)
        mask[valid] = True
    return mask
