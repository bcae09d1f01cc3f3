"""Z-buffer rasterization of vertex-colored meshes (visibility and previews)."""

from __future__ import annotations

import numpy as np

from . import _accel
from ._accel import njit
from .geometry import Camera, TriMesh


def to_pixels(cam: Camera, points):
    """Continuous pixel coords (pixel centers at +0.5) and camera depth, no behind-camera check."""
    pc = cam.world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = pc[:, 2]
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    u = cam.fl_x * pc[:, 0] / zs + cam.cx
    v = cam.fl_y * pc[:, 1] / zs + cam.cy
    return np.stack([u, v], axis=1), z


@njit
def _raster_kernel(px, z, tris, colors, H, W, znear, depth, image, tri_id):
    for t in range(tris.shape[0]):
        a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
        if z[a] <= znear or z[b] <= znear or z[c] <= znear:
            continue
        ax, ay = px[a, 0], px[a, 1]
        bx, by = px[b, 0], px[b, 1]
        cx, cy = px[c, 0], px[c, 1]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        x0 = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx) - 0.5)), W - 1)
        y0 = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy) - 0.5)), H - 1)
        for yi in range(y0, y1 + 1):
            py = yi + 0.5
            for xi in range(x0, x1 + 1):
                pxx = xi + 0.5
                w0 = ((bx - pxx) * (cy - py) - (by - py) * (cx - pxx)) / area
                w1 = ((cx - pxx) * (ay - py) - (cy - py) * (ax - pxx)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                # perspective-correct interpolation through 1/z
                iz = w0 / z[a] + w1 / z[b] + w2 / z[c]
                zz = 1.0 / iz
                if zz < depth[yi, xi]:
                    depth[yi, xi] = zz
                    tri_id[yi, xi] = t
                    p0 = w0 / z[a] * zz
                    p1 = w1 / z[b] * zz
                    p2 = w2 / z[c] * zz
                    for k in range(3):
                        image[yi, xi, k] = p0 * colors[a, k] + p1 * colors[b, k] + p2 * colors[c, k]


def _raster_numpy(px, z, tris, colors, H, W, znear, depth, image, tri_id):
    for t in range(len(tris)):
        a, b, c = tris[t]
        if min(z[a], z[b], z[c]) <= znear:
            continue
        (ax, ay), (bx, by), (cx, cy) = px[a], px[b], px[c]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) < 1e-12:
            continue
        x0 = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
        x1 = min(int(np.ceil(max(ax, bx, cx) - 0.5)), W - 1)
        y0 = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
        y1 = min(int(np.ceil(max(ay, by, cy) - 0.5)), H - 1)
        if x1 < x0 or y1 < y0:
            continue
        gy, gx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        pxx, pyy = gx + 0.5, gy + 0.5
        w0 = ((bx - pxx) * (cy - pyy) - (by - pyy) * (cx - pxx)) / area
        w1 = ((cx - pxx) * (ay - pyy) - (cy - pyy) * (ax - pxx)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        iz = w0 / z[a] + w1 / z[b] + w2 / z[c]
        zz = 1.0 / np.where(inside, iz, 1.0)
        win = inside & (zz < depth[y0:y1 + 1, x0:x1 + 1])
        if not win.any():
            continue
        yy, xx = gy[win], gx[win]
        zw = zz[win]
        p = np.stack([w0[win] / z[a], w1[win] / z[b], w2[win] / z[c]], axis=1) * zw[:, None]
        depth[yy, xx] = zw
        tri_id[yy, xx] = t
        image[yy, xx] = p @ colors[[a, b, c]]


def rasterize(mesh: TriMesh, cam: Camera, colors=None, background=1.0, znear=1e-6):
    """Render ``(image, depth, triangle id)``; uncovered pixels get ``background``, inf, -1."""
    H, W = int(cam.height), int(cam.width)
    px, z = to_pixels(cam, mesh.vertices)
    cols = mesh.colors if colors is None else colors
    if cols is None:
        cols = np.full((mesh.n_vertices, 3), 0.5)
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    depth = np.full((H, W), np.inf)
    image = np.full((H, W, 3), float(background))
    tri_id = np.full((H, W), -1, dtype=np.int64)
    tris = np.ascontiguousarray(mesh.triangles, dtype=np.int64)
    fn = _raster_kernel if _accel.use_numba() else _raster_numpy
    fn(np.ascontiguousarray(px), np.ascontiguousarray(z), tris, cols, H, W, znear, depth, image, tri_id)
    return image, depth, tri_id


def visible_vertices(mesh: TriMesh, cam: Camera, min_cos=0.1, depth_tol=0.02, depth=None):
    """Indices of vertices facing the camera and not hidden in the depth buffer."""
    if depth is None:
        _, depth, _ = rasterize(mesh, cam)
    H, W = depth.shape
    px, z = to_pixels(cam, mesh.vertices)
    normals = mesh.vertex_normals()
    center = cam.c2w[:3, 3]
    view = center - mesh.vertices
    view /= np.maximum(np.linalg.norm(view, axis=1, keepdims=True), 1e-12)
    facing = np.sum(normals * view, axis=1) > min_cos
    xi = np.floor(px[:, 0]).astype(np.int64)
    yi = np.floor(px[:, 1]).astype(np.int64)
    inside = (z > 1e-9) & (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
    ok = facing & inside
    idx = np.flatnonzero(ok)
    d = depth[yi[idx], xi[idx]]
    front = ~np.isfinite(d) | (z[idx] <= d + depth_tol)
    return idx[front]
