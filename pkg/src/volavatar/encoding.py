"""Multi-resolution hash-grid and frequency encodings."""

from __future__ import annotations

import math

import numpy as np

from . import _accel
from ._accel import njit
from .nets import tape as T

PRIMES = (1, 2654435761, 805459861)
_MASK32 = 0xFFFFFFFF


class HashGrid:
    """Trilinearly interpolated feature lattice per level, hashed when large.

    Level ``l`` has resolution ``N_l`` growing geometrically from
    ``n_min`` to ``n_max``. A level whose ``(N_l + 1)^3`` corners fit in the
    table is indexed densely; otherwise corner coordinates are hashed with
    the XOR-of-primes function modulo ``table_size``. Points are mapped
    into the unit cube through ``bbox`` and clamped to it.
    """

    def __init__(self, n_levels=16, table_size=2**17, n_features=4, n_min=16, n_max=2048,
                 bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)), seed=0, init_scale=1e-4, dtype=np.float32):
        self.n_levels = int(n_levels)
        self.table_size = int(table_size)
        self.n_features = int(n_features)
        self.n_min, self.n_max = int(n_min), int(n_max)
        self.bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
        if np.any(self.bbox[1] <= self.bbox[0]):
            raise ValueError("degenerate grid domain box")
        self.resolutions = level_resolutions(self.n_levels, self.n_min, self.n_max)
        self.dense = ((self.resolutions.astype(np.int64) + 1) ** 3 <= self.table_size)
        rng = np.random.default_rng(seed)
        self.table = rng.uniform(-init_scale, init_scale,
                                 size=(self.n_levels, self.table_size, self.n_features)).astype(dtype)

    @property
    def out_dim(self):
        return self.n_levels * self.n_features

    def normalize(self, x):
        """Map points into the unit cube; returns (x01, inside mask)."""
        x = np.asarray(x, dtype=np.float64)
        u = (x - self.bbox[0]) / (self.bbox[1] - self.bbox[0])
        inside = np.all((u >= 0.0) & (u <= 1.0), axis=-1)
        return np.clip(u, 0.0, 1.0), inside

    def query(self, x):
        """Encoded features ``(N, L*F)`` for points ``x`` (no gradient)."""
        u, _ = self.normalize(np.asarray(x).reshape(-1, 3))
        return _grid_forward(u, self.table, self.resolutions, self.dense)

    def __call__(self, x, tape=None, need_x_grad=False):
        """Tape-aware query; the table joins ``tape`` as a parameter."""
        xv = np.asarray(T.value(x), dtype=np.float64).reshape(-1, 3)
        u, inside = self.normalize(xv)
        feats = _grid_forward(u, self.table, self.resolutions, self.dense)
        if tape is None:
            return T.Var(feats)
        table_var = tape.param(self.table)
        scale = 1.0 / (self.bbox[1] - self.bbox[0])
        track_x = need_x_grad and isinstance(x, T.Var) and x.tape is not None

        def bw(g):
            gt, gu = _grid_backward(u, self.table, self.resolutions, self.dense, g, track_x)
            gx = None
            if track_x:
                gx = (gu * scale * inside[:, None]).astype(T.value(x).dtype, copy=False)
            return gt, gx

        return T.custom(feats, (table_var, x), bw)


def level_resolutions(n_levels, n_min, n_max):
    if n_levels == 1:
        return np.array([n_min], dtype=np.int64)
    b = math.exp((math.log(n_max) - math.log(n_min)) / (n_levels - 1))
    res = np.floor(n_min * b ** np.arange(n_levels) + 1e-9).astype(np.int64)
    for i in range(1, n_levels):
        if res[i] <= res[i - 1]:
            res[i] = res[i - 1] + 1
    return res


# --- kernels -------------------------------------------------------------------


@njit
def _corner_index(ix, iy, iz, n, dense, m):
    if dense:
        return ix + iy * (n + 1) + iz * (n + 1) * (n + 1)
    h = (ix * 1) ^ ((iy * 2654435761) & 0xFFFFFFFF) ^ ((iz * 805459861) & 0xFFFFFFFF)
    return (h & 0xFFFFFFFF) % m


@njit
def _forward_kernel(u, table, res, dense, out):
    L = table.shape[0]
    m = table.shape[1]
    F = table.shape[2]
    for q in range(u.shape[0]):
        for lv in range(L):
            n = res[lv]
            px = u[q, 0] * n
            py = u[q, 1] * n
            pz = u[q, 2] * n
            ix = min(int(np.floor(px)), n - 1)
            iy = min(int(np.floor(py)), n - 1)
            iz = min(int(np.floor(pz)), n - 1)
            fx = px - ix
            fy = py - iy
            fz = pz - iz
            for f in range(F):
                out[q, lv * F + f] = 0.0
            for c in range(8):
                dx = c & 1
                dy = (c >> 1) & 1
                dz = (c >> 2) & 1
                w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
                idx = _corner_index(ix + dx, iy + dy, iz + dz, n, dense[lv], m)
                for f in range(F):
                    out[q, lv * F + f] += w * table[lv, idx, f]


@njit
def _backward_kernel(u, table, res, dense, g, gtable, gu, want_x):
    L = table.shape[0]
    m = table.shape[1]
    F = table.shape[2]
    for q in range(u.shape[0]):
        for lv in range(L):
            n = res[lv]
            px = u[q, 0] * n
            py = u[q, 1] * n
            pz = u[q, 2] * n
            ix = min(int(np.floor(px)), n - 1)
            iy = min(int(np.floor(py)), n - 1)
            iz = min(int(np.floor(pz)), n - 1)
            fx = px - ix
            fy = py - iy
            fz = pz - iz
            for c in range(8):
                dx = c & 1
                dy = (c >> 1) & 1
                dz = (c >> 2) & 1
                wx = fx if dx else 1.0 - fx
                wy = fy if dy else 1.0 - fy
                wz = fz if dz else 1.0 - fz
                w = wx * wy * wz
                idx = _corner_index(ix + dx, iy + dy, iz + dz, n, dense[lv], m)
                dot = 0.0
                for f in range(F):
                    gf = g[q, lv * F + f]
                    gtable[lv, idx, f] += w * gf
                    if want_x:
                        dot += gf * table[lv, idx, f]
                if want_x:
                    sx = 1.0 if dx else -1.0
                    sy = 1.0 if dy else -1.0
                    sz = 1.0 if dz else -1.0
                    gu[q, 0] += dot * sx * wy * wz * n
                    gu[q, 1] += dot * wx * sy * wz * n
                    gu[q, 2] += dot * wx * wy * sz * n


def _level_corners(u, n, dense, m):
    """Corner indices (N, 8), per-axis fractions (N, 3) and corner bits (8, 3)."""
    p = u * n
    i0 = np.minimum(np.floor(p).astype(np.int64), n - 1)
    frac = p - i0
    bits = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)
    ci = i0[:, None, :] + bits[None]
    if dense:
        idx = ci[..., 0] + ci[..., 1] * (n + 1) + ci[..., 2] * (n + 1) * (n + 1)
    else:
        h = (ci[..., 0] * PRIMES[0]) ^ ((ci[..., 1] * PRIMES[1]) & _MASK32) ^ ((ci[..., 2] * PRIMES[2]) & _MASK32)
        idx = (h & _MASK32) % m
    return idx, frac, bits


def _corner_weights(frac, bits):
    w_axis = np.where(bits[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :])  # (N, 8, 3)
    return w_axis


def _grid_forward(u, table, res, dense):
    u = np.ascontiguousarray(u, dtype=np.float64)
    n_pts = len(u)
    L, m, F = table.shape
    out = np.empty((n_pts, L * F), dtype=table.dtype)
    if _accel.use_numba():
        _forward_kernel(u, table, res, dense, out)
        return out
    for lv in range(L):
        idx, frac, bits = _level_corners(u, int(res[lv]), bool(dense[lv]), m)
        wa = _corner_weights(frac, bits)
        w = wa[..., 0] * wa[..., 1] * wa[..., 2]
        feats = table[lv][idx]  # (N, 8, F)
        out[:, lv * F:(lv + 1) * F] = np.einsum("nc,ncf->nf", w, feats)
    return out


def _grid_backward(u, table, res, dense, g, want_x):
    u = np.ascontiguousarray(u, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=table.dtype)
    L, m, F = table.shape
    gtable = np.zeros_like(table)
    gu = np.zeros((len(u), 3), dtype=np.float64)
    if _accel.use_numba():
        _backward_kernel(u, table, res, dense, g, gtable, gu, bool(want_x))
        return gtable, gu
    for lv in range(L):
        n = int(res[lv])
        idx, frac, bits = _level_corners(u, n, bool(dense[lv]), m)
        wa = _corner_weights(frac, bits)
        w = wa[..., 0] * wa[..., 1] * wa[..., 2]
        gl = g[:, lv * F:(lv + 1) * F]
        contrib = (w[..., None] * gl[:, None, :]).astype(table.dtype)
        np.add.at(gtable[lv], idx.reshape(-1), contrib.reshape(-1, F))
        if want_x:
            dot = np.einsum("ncf,nf->nc", table[lv][idx], gl)
            sign = np.where(bits == 1, 1.0, -1.0)  # (8, 3)
            for ax in range(3):
                others = [a for a in range(3) if a != ax]
                dw = sign[None, :, ax] * wa[..., others[0]] * wa[..., others[1]] * n
                gu[:, ax] += np.sum(dot * dw, axis=1)
    return gtable, gu


def grid_query(grid: HashGrid, x):
    return grid.query(x)


def grid_backward(grid: HashGrid, x, upstream):
    """Table gradient and spatial gradient for ``sum(upstream * grid(x))``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    u, inside = grid.normalize(x)
    gt, gu = _grid_backward(u, grid.table, grid.resolutions, grid.dense, upstream, True)
    gx = gu / (grid.bbox[1] - grid.bbox[0]) * inside[:, None]
    return gt, gx


def corner_weights(grid: HashGrid, x, level):
    """Corner table indices and trilinear weights of one level (diagnostics/tests)."""
    u, _ = grid.normalize(np.asarray(x).reshape(-1, 3))
    idx, frac, bits = _level_corners(u, int(grid.resolutions[level]), bool(grid.dense[level]), grid.table_size)
    wa = _corner_weights(frac, bits)
    return idx, wa[..., 0] * wa[..., 1] * wa[..., 2]


# --- frequency encoding -------------------------------------------------------


def freq_encode(v, n_freqs):
    """``[sin(2^p pi v), cos(2^p pi v)]`` for p = 0..P-1, concatenated per p.

    Accepts a vector or a batch ``(N, D)``; output has ``D * 2P`` columns.
    """
    if n_freqs < 1:
        raise ValueError("need at least one frequency")
    v = np.asarray(T.value(v), dtype=np.float64)
    squeeze = v.ndim == 1
    v2 = v.reshape(1, -1) if squeeze else v
    parts = []
    for p in range(n_freqs):
        a = (2.0**p) * np.pi * v2
        parts.append(np.sin(a))
        parts.append(np.cos(a))
    out = np.concatenate(parts, axis=-1)
    return out[0] if squeeze else out
