"""Triangle meshes, pinhole cameras and point/triangle distance queries."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import _accel
from ._accel import njit

FACE = 1
NON_FACE = 0


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class BehindCameraError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8).reshape(-1)
        self.validate()

    def validate(self):
        nv = len(self.vertices)
        t = self.triangles
        if len(t):
            if t.min() < 0 or t.max() >= nv:
                raise MeshError(f"triangle index out of range for {nv} vertices")
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise MeshError("triangle repeats a vertex index")
        if self.colors is not None and len(self.colors) != nv:
            raise MeshError("per-vertex colors do not cover all vertices")
        if self.labels is not None and len(self.labels) != nv:
            raise MeshError("region labels do not cover all vertices")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def corners(self):
        """(T, 3, 3) array of triangle corner positions."""
        return self.vertices[self.triangles]

    def with_vertices(self, vertices):
        return TriMesh(vertices, self.triangles, self.colors, self.labels)

    def vertex_normals(self):
        c = self.corners()
        fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.triangles[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.maximum(norm, 1e-12)

    def face_normals(self):
        c = self.corners()
        fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        return fn / np.maximum(np.linalg.norm(fn, axis=1, keepdims=True), 1e-300)


def load_mesh(path) -> TriMesh:
    """Read the OBJ subset: ``v x y z [r g b]``, optional ``vt``/``vn``, ``f``.

    Faces with more than three corners are fan-triangulated. Indices are
    1-based; negative indices count back from the last vertex read.
    """
    path = Path(path)
    verts, cols, tris = [], [], []
    has_color = None
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                try:
                    vals = [float(s) for s in parts[1:]]
                except ValueError:
                    raise ObjParseError(path, line_no, "non-numeric vertex coordinate") from None
                if len(vals) not in (3, 4, 6, 7):
                    raise ObjParseError(path, line_no, f"vertex with {len(vals)} values")
                this_color = len(vals) >= 6
                if has_color is None:
                    has_color = this_color
                elif has_color != this_color:
                    raise ObjParseError(path, line_no, "mixed colored and uncolored vertices")
                verts.append(vals[:3])
                if this_color:
                    cols.append(vals[-3:])
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(path, line_no, "face with fewer than 3 corners")
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise ObjParseError(path, line_no, f"bad face index {tok!r}") from None
                    if i == 0:
                        raise ObjParseError(path, line_no, "face index 0 (OBJ indices are 1-based)")
                    i = i - 1 if i > 0 else len(verts) + i
                    if i < 0 or i >= len(verts):
                        raise ObjParseError(path, line_no, f"face index {tok} out of range")
                    idx.append(i)
                for k in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[k], idx[k + 1]))
            elif tag in ("vt", "vn", "o", "g", "s", "usemtl", "mtllib", "l"):
                continue
            else:
                raise ObjParseError(path, line_no, f"unsupported statement {tag!r}")
    return TriMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        np.array(tris, dtype=np.int64).reshape(-1, 3),
        colors=np.array(cols, dtype=np.float64) if has_color else None,
    )


def save_mesh(mesh: TriMesh, path):
    with open(path, "w") as fh:
        fh.write(f"# {mesh.n_vertices} vertices, {mesh.n_triangles} triangles\n")
        for i, v in enumerate(mesh.vertices):
            if mesh.colors is not None:
                c = mesh.colors[i]
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g} {c[0]:.6g} {c[1]:.6g} {c[2]:.6g}\n")
            else:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


# --- point / triangle -------------------------------------------------------
#
# Region-based closest point (Ericson, Real-Time Collision Detection 5.1.5).
# The scalar kernel and the vectorized version evaluate the same expressions
# in the same order so the BVH and brute-force paths agree bit-for-bit.

_DEGENERATE_REL = 1e-12


@njit
def _closest_scalar(px, py, pz, ax, ay, az, bx, by, bz, cx, cy, cz):
    abx = bx - ax
    aby = by - ay
    abz = bz - az
    acx = cx - ax
    acy = cy - ay
    acz = cz - az
    # degenerate check on the squared area against the longest edge
    nx = aby * acz - abz * acy
    ny = abz * acx - abx * acz
    nz = abx * acy - aby * acx
    n2 = nx * nx + ny * ny + nz * nz
    bcx = cx - bx
    bcy = cy - by
    bcz = cz - bz
    lab = abx * abx + aby * aby + abz * abz
    lac = acx * acx + acy * acy + acz * acz
    lbc = bcx * bcx + bcy * bcy + bcz * bcz
    lmax = max(lab, max(lac, lbc))
    if n2 <= (_DEGENERATE_REL * lmax) * (_DEGENERATE_REL * lmax):
        # closest point on the longest edge
        if lmax == 0.0:
            return ax, ay, az, 1.0, 0.0, 0.0
        if lab >= lac and lab >= lbc:
            t = ((px - ax) * abx + (py - ay) * aby + (pz - az) * abz) / lab
            t = min(max(t, 0.0), 1.0)
            return ax + t * abx, ay + t * aby, az + t * abz, 1.0 - t, t, 0.0
        if lac >= lbc:
            t = ((px - ax) * acx + (py - ay) * acy + (pz - az) * acz) / lac
            t = min(max(t, 0.0), 1.0)
            return ax + t * acx, ay + t * acy, az + t * acz, 1.0 - t, 0.0, t
        t = ((px - bx) * bcx + (py - by) * bcy + (pz - bz) * bcz) / lbc
        t = min(max(t, 0.0), 1.0)
        return bx + t * bcx, by + t * bcy, bz + t * bcz, 0.0, 1.0 - t, t

    apx = px - ax
    apy = py - ay
    apz = pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az, 1.0, 0.0, 0.0
    bpx = px - bx
    bpy = py - by
    bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz, 0.0, 1.0, 0.0
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return ax + v * abx, ay + v * aby, az + v * abz, 1.0 - v, v, 0.0
    cpx = px - cx
    cpy = py - cy
    cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz, 0.0, 0.0, 1.0
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return ax + w * acx, ay + w * acy, az + w * acz, 1.0 - w, 0.0, w
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return bx + w * bcx, by + w * bcy, bz + w * bcz, 0.0, 1.0 - w, w
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w,
            1.0 - v - w, v, w)


def closest_points_on_triangles(p, a, b, c):
    """Vectorized closest point of ``p`` on triangles ``(a, b, c)``.

    All inputs broadcast against each other with trailing dimension 3.
    Returns ``(closest, bary)`` with bary of shape ``(..., 3)``.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (p, a, b, c)))
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    ax, ay, az = a[..., 0], a[..., 1], a[..., 2]
    bx, by, bz = b[..., 0], b[..., 1], b[..., 2]
    cx, cy, cz = c[..., 0], c[..., 1], c[..., 2]
    abx, aby, abz = bx - ax, by - ay, bz - az
    acx, acy, acz = cx - ax, cy - ay, cz - az
    bcx, bcy, bcz = cx - bx, cy - by, cz - bz
    nx = aby * acz - abz * acy
    ny = abz * acx - abx * acz
    nz = abx * acy - aby * acx
    n2 = nx * nx + ny * ny + nz * nz
    lab = abx * abx + aby * aby + abz * abz
    lac = acx * acx + acy * acy + acz * acz
    lbc = bcx * bcx + bcy * bcy + bcz * bcz
    lmax = np.maximum(lab, np.maximum(lac, lbc))

    shape = px.shape
    out = np.empty(shape + (3,))
    bary = np.empty(shape + (3,))
    done = np.zeros(shape, dtype=bool)

    def assign(mask, xyz, uvw):
        m = mask & ~done
        if np.any(m):
            for k in range(3):
                out[..., k][m] = xyz[k][m] if np.ndim(xyz[k]) else xyz[k]
                bary[..., k][m] = uvw[k][m] if np.ndim(uvw[k]) else uvw[k]
            done[m] = True

    with np.errstate(divide="ignore", invalid="ignore"):
        degenerate = n2 <= (_DEGENERATE_REL * lmax) * (_DEGENERATE_REL * lmax)
        if np.any(degenerate):
            zero = degenerate & (lmax == 0.0)
            assign(zero, (ax, ay, az), (1.0, 0.0, 0.0))
            use_ab = degenerate & (lab >= lac) & (lab >= lbc)
            t = np.clip(((px - ax) * abx + (py - ay) * aby + (pz - az) * abz) / lab, 0.0, 1.0)
            assign(use_ab, (ax + t * abx, ay + t * aby, az + t * abz), (1.0 - t, t, 0.0 * t))
            use_ac = degenerate & (lac >= lbc)
            t = np.clip(((px - ax) * acx + (py - ay) * acy + (pz - az) * acz) / lac, 0.0, 1.0)
            assign(use_ac, (ax + t * acx, ay + t * acy, az + t * acz), (1.0 - t, 0.0 * t, t))
            t = np.clip(((px - bx) * bcx + (py - by) * bcy + (pz - bz) * bcz) / lbc, 0.0, 1.0)
            assign(degenerate, (bx + t * bcx, by + t * bcy, bz + t * bcz), (0.0 * t, 1.0 - t, t))

        apx, apy, apz = px - ax, py - ay, pz - az
        d1 = abx * apx + aby * apy + abz * apz
        d2 = acx * apx + acy * apy + acz * apz
        assign((d1 <= 0.0) & (d2 <= 0.0), (ax, ay, az), (1.0, 0.0, 0.0))
        bpx, bpy, bpz = px - bx, py - by, pz - bz
        d3 = abx * bpx + aby * bpy + abz * bpz
        d4 = acx * bpx + acy * bpy + acz * bpz
        assign((d3 >= 0.0) & (d4 <= d3), (bx, by, bz), (0.0, 1.0, 0.0))
        vc = d1 * d4 - d3 * d2
        v = d1 / (d1 - d3)
        assign((vc <= 0.0) & (d1 >= 0.0) & (d3 <= 0.0),
               (ax + v * abx, ay + v * aby, az + v * abz), (1.0 - v, v, 0.0 * v))
        cpx, cpy, cpz = px - cx, py - cy, pz - cz
        d5 = abx * cpx + aby * cpy + abz * cpz
        d6 = acx * cpx + acy * cpy + acz * cpz
        assign((d6 >= 0.0) & (d5 <= d6), (cx, cy, cz), (0.0, 0.0, 1.0))
        vb = d5 * d2 - d1 * d6
        w = d2 / (d2 - d6)
        assign((vb <= 0.0) & (d2 >= 0.0) & (d6 <= 0.0),
               (ax + w * acx, ay + w * acy, az + w * acz), (1.0 - w, 0.0 * w, w))
        va = d3 * d6 - d5 * d4
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0.0) & ((d4 - d3) >= 0.0) & ((d5 - d6) >= 0.0),
               (bx + w * bcx, by + w * bcy, bz + w * bcz), (0.0 * w, 1.0 - w, w))
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(shape, dtype=bool),
               (ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w),
               (1.0 - v - w, v, w))
    return out, bary


def point_distance(p, q):
    """Euclidean distance with a fixed evaluation order (shared by all paths)."""
    d = np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])


def point_triangle_closest(p, tri):
    """Closest point on a (possibly degenerate) triangle.

    Returns ``(closest, dist, bary)``; degenerate triangles fall back to the
    closest point on their longest edge.
    """
    tri = np.asarray(tri, dtype=np.float64)
    closest, bary = closest_points_on_triangles(p, tri[..., 0, :], tri[..., 1, :], tri[..., 2, :])
    return closest, point_distance(p, closest), bary


@njit
def _brute_kernel(points, corners, out):
    for q in range(points.shape[0]):
        px = points[q, 0]
        py = points[q, 1]
        pz = points[q, 2]
        best = np.inf
        best_t = -1
        for t in range(corners.shape[0]):
            c = corners[t]
            r = _closest_scalar(px, py, pz, c[0, 0], c[0, 1], c[0, 2], c[1, 0], c[1, 1], c[1, 2],
                                c[2, 0], c[2, 1], c[2, 2])
            dx = px - r[0]
            dy = py - r[1]
            dz = pz - r[2]
            d2 = dx * dx + dy * dy + dz * dz
            if d2 < best:
                best = d2
                best_t = t
        out[q] = best_t


def brute_force_nearest(corners, points):
    """Nearest triangle by exhaustive scan; ties go to the lowest index.

    ``corners`` is ``(T, 3, 3)``, ``points`` is ``(Q, 3)``. Returns
    ``(tri_index, closest, dist, bary)``.
    """
    corners = np.ascontiguousarray(corners, dtype=np.float64)
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    nq, nt = len(points), len(corners)
    idx = np.empty(nq, dtype=np.int64)
    if _accel.use_numba():
        _brute_kernel(points, corners, idx)
    else:
        chunk = max(1, 2_000_000 // max(nt, 1))
        for s in range(0, nq, chunk):
            p = points[s:s + chunk, None, :]
            closest, _ = closest_points_on_triangles(p, corners[None, :, 0], corners[None, :, 1],
                                                     corners[None, :, 2])
            d = p - closest
            d2 = d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]
            idx[s:s + chunk] = np.argmin(d2, axis=1)  # first minimum = lowest index
    closest, dist, bary = point_triangle_closest(points, corners[idx])
    return idx, closest, dist, bary


def chamfer_distance(a, b):
    """Mean squared nearest-neighbour distance a->b plus b->a."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance of an empty point set")
    dab, _ = cKDTree(b).query(a)
    dba, _ = cKDTree(a).query(b)
    return float(np.mean(dab**2) + np.mean(dba**2))


def bounding_sphere(mesh_or_points):
    """Ritter's approximate bounding sphere, grown until it holds every point."""
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriMesh) else np.asarray(mesh_or_points, float)
    pts = pts.reshape(-1, 3)
    if len(pts) == 0:
        raise MeshError("bounding sphere of an empty mesh")
    x = pts[0]
    y = pts[np.argmax(np.sum((pts - x) ** 2, axis=1))]
    z = pts[np.argmax(np.sum((pts - y) ** 2, axis=1))]
    center = 0.5 * (y + z)
    radius = 0.5 * float(np.linalg.norm(z - y))
    for p in pts:
        d = float(np.linalg.norm(p - center))
        if d > radius:
            new_r = 0.5 * (radius + d)
            center = center + (d - new_r) / d * (p - center)
            radius = new_r
    # absorb round-off so containment holds exactly
    radius = max(radius, float(np.max(np.linalg.norm(pts - center, axis=1))))
    return center, radius


# --- cameras ----------------------------------------------------------------


@dataclass
class Camera:
    """Pinhole camera; ``c2w`` is right-handed with +Z forward, +Y down."""

    c2w: np.ndarray
    fl_x: float
    fl_y: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        r = self.c2w[:3, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if self.fl_x <= 0 or self.fl_y <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def rotation(self):
        return self.c2w[:3, :3]

    @property
    def center(self):
        return self.c2w[:3, 3]

    def world_to_camera(self, p):
        return (np.asarray(p, dtype=np.float64) - self.center) @ self.rotation

    def camera_to_world(self, q):
        return np.asarray(q, dtype=np.float64) @ self.rotation.T + self.center

    def intrinsics(self):
        return np.array([[self.fl_x, 0, self.cx], [0, self.fl_y, self.cy], [0, 0, 1.0]])

    def scaled(self, factor):
        """Same camera for an image resized by ``factor``."""
        return Camera(self.c2w, self.fl_x * factor, self.fl_y * factor, self.cx * factor,
                      self.cy * factor, int(round(self.width * factor)), int(round(self.height * factor)))


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world matrix looking from ``eye`` at ``target``.

    ``up`` is the world direction that should appear upward in the image;
    with +Y pointing down the image, the camera's y axis is its negation.
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
    return m


def project(cam: Camera, p):
    """Pixel coordinates ``(u, v)`` of world points; raises for points behind."""
    q = cam.world_to_camera(p)
    z = q[..., 2]
    if np.any(z <= 1e-9):
        raise BehindCameraError("point is behind the camera")
    u = cam.fl_x * q[..., 0] / z + cam.cx
    v = cam.fl_y * q[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1)


def unproject(cam: Camera, uv, depth):
    """World point at camera-space depth ``depth`` seen at pixel ``uv``."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (uv[..., 0] - cam.cx) / cam.fl_x * depth
    y = (uv[..., 1] - cam.cy) / cam.fl_y * depth
    return cam.camera_to_world(np.stack([x, y, depth * np.ones_like(x)], axis=-1))


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError("ray bounds must satisfy 0 <= t_near < t_far")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def rotation_matrix(axis_angle):
    """Rodrigues' formula for a single axis-angle vector (float64)."""
    a = np.asarray(axis_angle, dtype=np.float64)
    th = float(np.linalg.norm(a))
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    if th < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return np.eye(3) + np.sin(th) / th * k + (1 - np.cos(th)) / th**2 * k @ k
