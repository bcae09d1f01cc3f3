"""Rays, near-surface sampling, the canonical appearance field, compositing and losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from . import bvh as bvh_mod
from ._accel import njit
from .deformation import BlendFieldBasis, CoarseField, blend_displacement, face_gate
from .encoding import HashGrid, freq_encode
from .geometry import Camera
from .nets import Mlp
from .nets import tape as T

WHITE = 1.0
HUBER_EPS = 0.1
BETA_GUARD = 1e-7
PATCH = 32


class PatchError(ValueError):
    pass


# --- rays ------------------------------------------------------------------------------


@dataclass
class Rays:
    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    t_near: np.ndarray  # (R,)
    t_far: np.ndarray  # (R,)
    pixels: np.ndarray  # (R, 2) integer (x, y)

    @property
    def valid(self):
        return self.t_far > self.t_near

    def __len__(self):
        return len(self.origins)


def sphere_bounds(origins, dirs, center, radius):
    """Entry/exit distances of unit rays through a sphere; misses give (0, 0)."""
    oc = origins - np.asarray(center)
    b = np.sum(oc * dirs, axis=1)
    c = np.sum(oc * oc, axis=1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = np.maximum(-b - sq, 0.0)
    t1 = -b + sq
    ok = hit & (t1 > t0)
    return np.where(ok, t0, 0.0), np.where(ok, t1, 0.0)


def pixel_rays(cam: Camera, xs, ys, sphere):
    """Rays through pixel centers ``(xs + 0.5, ys + 0.5)`` bounded by ``sphere = (center, radius)``."""
    xs = np.asarray(xs).ravel()
    ys = np.asarray(ys).ravel()
    d_cam = np.stack([(xs + 0.5 - cam.cx) / cam.fl_x, (ys + 0.5 - cam.cy) / cam.fl_y, np.ones(len(xs))], axis=1)
    d = d_cam @ cam.c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.c2w[:3, 3], d.shape).copy()
    t0, t1 = sphere_bounds(o, d, sphere[0], sphere[1])
    return Rays(o, d, t0, t1, np.stack([xs, ys], axis=1).astype(np.int64))


def generate_rays(cam: Camera, origin, side, sphere):
    """One ray per pixel of the ``side x side`` patch whose top-left pixel is ``origin``."""
    x0, y0 = int(origin[0]), int(origin[1])
    if x0 < 0 or y0 < 0 or x0 + side > cam.width or y0 + side > cam.height or side < 1:
        raise PatchError(f"patch at ({x0}, {y0}) of side {side} leaves the {cam.width}x{cam.height} image")
    ys, xs = np.mgrid[y0:y0 + side, x0:x0 + side]
    return pixel_rays(cam, xs, ys, sphere)


def image_rays(cam: Camera, sphere):
    ys, xs = np.mgrid[0:cam.height, 0:cam.width]
    return pixel_rays(cam, xs, ys, sphere)


# --- sampling ------------------------------------------------------------------------


@dataclass
class RaySamples:
    """Ragged per-ray samples: ray ``r`` owns ``offsets[r]:offsets[r+1]``."""

    offsets: np.ndarray  # (R+1,)
    t: np.ndarray  # (S,)
    delta: np.ndarray  # (S,)
    x_d: np.ndarray  # (S, 3) deformed-space positions
    x: np.ndarray  # (S, 3) canonical positions from the coarse warp
    gate: np.ndarray  # (S,) face gate
    dirs: np.ndarray  # (S, 3) ray direction per sample
    tri: np.ndarray | None = None  # (S,) nearest deformed triangle

    @property
    def n_rays(self):
        return len(self.offsets) - 1

    @property
    def counts(self):
        return np.diff(self.offsets)

    def ray_ids(self):
        return np.repeat(np.arange(self.n_rays), self.counts)

    def select(self, rays_idx):
        """Samples of a subset of rays, in the given order."""
        rays_idx = np.asarray(rays_idx, dtype=np.int64)
        starts = self.offsets[rays_idx]
        counts = self.offsets[rays_idx + 1] - starts
        offs = np.concatenate([[0], np.cumsum(counts)])
        idx = np.repeat(starts - offs[:-1], counts) + np.arange(offs[-1])
        return RaySamples(offs, self.t[idx], self.delta[idx], self.x_d[idx], self.x[idx], self.gate[idx],
                          self.dirs[idx], None if self.tri is None else self.tri[idx])

    def filter(self, keep):
        """Samples where ``keep`` is true; rays keep their slots (possibly empty)."""
        keep = np.asarray(keep, dtype=bool)
        counts = np.bincount(self.ray_ids()[keep], minlength=self.n_rays)
        offs = np.concatenate([[0], np.cumsum(counts)])
        return RaySamples(offs, self.t[keep], self.delta[keep], self.x_d[keep], self.x[keep], self.gate[keep],
                          self.dirs[keep], None if self.tri is None else self.tri[keep])


def march(rays: Rays, tree, n_max=128, radius=0.05):
    """Stratum midpoints within ``radius`` of the mesh in ``tree``.

    Returns ``(offsets, t, delta, points, hits, ray index per sample)``;
    ``delta_i`` is the gap to the next survivor, capped at the stratum width.
    """
    R = len(rays)
    valid = rays.valid
    step = np.where(valid, (rays.t_far - rays.t_near) / n_max, 0.0)
    cand = bvh_mod.candidate_sample_mask(tree, rays.origins, rays.dirs, rays.t_near,
                                         np.where(valid, rays.t_far, rays.t_near), radius, n_max)
    cand &= valid[:, None]
    rr, kk = np.nonzero(cand)
    t = rays.t_near[rr] + (kk + 0.5) * step[rr]
    pts = rays.origins[rr] + t[:, None] * rays.dirs[rr]
    hit = bvh_mod.nearest_triangles(tree, pts, max_dist=radius)
    keep = (hit.triangle >= 0) & (hit.distance <= radius)
    rr, t, pts = rr[keep], t[keep], pts[keep]
    hit = hit[keep]
    counts = np.bincount(rr, minlength=R)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    nxt = np.full(len(t), np.inf)
    nxt[:-1] = t[1:] - t[:-1]
    nxt[offsets[1:][counts > 0] - 1] = np.inf
    delta = np.minimum(nxt, step[rr])
    return offsets, t, delta, pts, hit, rr


def sample_rays(rays: Rays, field: CoarseField, n_max=128, radius=0.05) -> RaySamples:
    """Near-surface samples on each ray, warped to canonical space with their face gate."""
    offsets, t, delta, pts, hit, rr = march(rays, field.bvh, n_max, radius)
    x = warp_with_hits(field, pts, hit)
    gate = face_gate(field, hit) if len(t) else np.zeros(0)
    return RaySamples(offsets, t, delta, pts, x, gate, rays.dirs[rr], hit.triangle)


def sample_ray(ray_origin, ray_dir, t_near, t_far, field: CoarseField, n_max=128, radius=0.05) -> RaySamples:
    rays = Rays(np.asarray(ray_origin, float).reshape(1, 3), np.asarray(ray_dir, float).reshape(1, 3),
                np.array([t_near], float), np.array([t_far], float), np.zeros((1, 2), np.int64))
    return sample_rays(rays, field, n_max, radius)


def warp_with_hits(field: CoarseField, x_d, hit):
    t = hit.triangle
    return np.einsum("nab,nb->na", field.A[t], x_d - field.o_d[t]) + field.o_c[t]


# --- appearance ----------------------------------------------------------------------


class AppearanceField:
    """Canonical grid, a density branch and a view-dependent color branch.

    The density branch outputs ``1 + latent`` values: softplus of the first
    (plus ``density_shift``) is the density, the rest feed the color branch together with the
    frequency-encoded ray direction. ``extra_dim`` widens the density input
    for the conditioning variants.
    """

    def __init__(self, grid_kw=None, density_hidden=(64,), latent=15, color_hidden=(64, 64), dir_freqs=4,
                 extra_dim=0, seed=0, zero_init=False, density_shift=0.0, dtype=np.float32):
        self.grid = HashGrid(seed=seed + 101, dtype=dtype, **dict(grid_kw or {}))
        self.extra_dim = int(extra_dim)
        self.dir_freqs = int(dir_freqs)
        self.latent = int(latent)
        self.density_shift = float(density_shift)
        self.density = Mlp([self.grid.out_dim + self.extra_dim, *density_hidden, 1 + self.latent], out_act=None,
                           zero_last=zero_init, seed=seed + 102, dtype=dtype, name="density")
        self.color = Mlp([self.latent + 3 * 2 * self.dir_freqs, *color_hidden, 3], out_act="sigmoid",
                         zero_last=zero_init, seed=seed + 103, dtype=dtype, name="color")
        self.dtype = dtype

    @property
    def params(self):
        out = {"appearance.grid": self.grid.table}
        out.update(self.density.params)
        out.update(self.color.params)
        return out

    def __call__(self, x, dirs, extra=None, tape=None, need_x_grad=False):
        feats = self.grid(x, tape, need_x_grad=need_x_grad)
        if self.extra_dim:
            if extra is None:
                raise ValueError("this appearance field expects extra conditioning inputs")
            feats = T.concat([feats, extra], axis=1)
        h = self.density(feats, tape)
        h0 = T.getitem(h, (slice(None), 0))
        sigma = T.softplus(T.add(h0, self.density_shift) if self.density_shift else h0)
        lat = T.getitem(h, (slice(None), slice(1, None)))
        denc = freq_encode(np.asarray(dirs, dtype=np.float64).reshape(-1, 3), self.dir_freqs).astype(self.dtype)
        c = self.color(T.concat([lat, denc], axis=1), tape)
        return sigma, c


def query_appearance(app: AppearanceField, basis: BlendFieldBasis | None, coarse: CoarseField, x_d, dirs, w=None,
                     tape=None):
    """Density and color at deformed points: coarse warp, gated blendfield offset, appearance."""
    from .deformation import coarse_deform
    x, hit = coarse_deform(coarse, x_d)
    x_in = x.astype(app.dtype)
    if basis is not None and w is not None:
        gate = face_gate(coarse, hit).astype(app.dtype)
        dx = blend_displacement(basis, x, w, tape)
        x_in = T.add(x_in, T.mul(gate[:, None], dx))
    return app(x_in, dirs, tape=tape, need_x_grad=basis is not None)


# --- compositing ---------------------------------------------------------------------


@njit
def _composite_fwd_kernel(tau, color, offsets, bg, out_c, out_g, trans):
    for r in range(len(offsets) - 1):
        Tr = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for i in range(offsets[r], offsets[r + 1]):
            trans[i] = Tr
            a = 1.0 - np.exp(-tau[i])
            w = Tr * a
            c0 += w * color[i, 0]
            c1 += w * color[i, 1]
            c2 += w * color[i, 2]
            Tr *= 1.0 - a
        g = 1.0 - Tr
        out_g[r] = g
        out_c[r, 0] = c0 + (1.0 - g) * bg
        out_c[r, 1] = c1 + (1.0 - g) * bg
        out_c[r, 2] = c2 + (1.0 - g) * bg


@njit
def _composite_bwd_kernel(tau, color, offsets, bg, trans, gc, gg, g_tau, g_col):
    for r in range(len(offsets) - 1):
        s, e = offsets[r], offsets[r + 1]
        if e == s:
            continue
        t_final = trans[e - 1] * np.exp(-tau[e - 1])
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        for i in range(e - 1, s - 1, -1):
            a = 1.0 - np.exp(-tau[i])
            w = trans[i] * a
            t_next = trans[i] * (1.0 - a)
            e0 = color[i, 0] - bg
            e1 = color[i, 1] - bg
            e2 = color[i, 2] - bg
            g_tau[i] = (gc[r, 0] * (t_next * e0 - s0) + gc[r, 1] * (t_next * e1 - s1)
                        + gc[r, 2] * (t_next * e2 - s2) + gg[r] * t_final)
            g_col[i, 0] = gc[r, 0] * w
            g_col[i, 1] = gc[r, 1] * w
            g_col[i, 2] = gc[r, 2] * w
            s0 += w * e0
            s1 += w * e1
            s2 += w * e2


def _segment_excl_cumsum(x, offsets):
    cs = np.cumsum(x)
    starts = np.repeat(offsets[:-1], np.diff(offsets))
    base = np.concatenate([[0.0], cs])[starts]
    return cs - x - base


def _composite_fwd_numpy(tau, color, offsets, bg):
    R = len(offsets) - 1
    rid = np.repeat(np.arange(R), np.diff(offsets))
    trans = np.exp(-_segment_excl_cumsum(tau, offsets))
    w = trans * (1.0 - np.exp(-tau))
    g = np.bincount(rid, weights=w, minlength=R)
    c = np.stack([np.bincount(rid, weights=w * color[:, k], minlength=R) for k in range(3)], axis=1)
    return c + (1.0 - g)[:, None] * bg, g, trans


def _composite_bwd_numpy(tau, color, offsets, bg, trans, gc, gg):
    R = len(offsets) - 1
    counts = np.diff(offsets)
    rid = np.repeat(np.arange(R), counts)
    a = 1.0 - np.exp(-tau)
    w = trans * a
    t_next = trans * (1.0 - a)
    e = color - bg
    we = w[:, None] * e
    # suffix sums within each ray: total - inclusive prefix
    tot = np.stack([np.bincount(rid, weights=we[:, k], minlength=R) for k in range(3)], axis=1)
    incl = np.stack([_segment_excl_cumsum(we[:, k], offsets) + we[:, k] for k in range(3)], axis=1)
    suffix = tot[rid] - incl
    last = offsets[1:][counts > 0] - 1
    t_final_r = np.ones(R)
    t_final_r[counts > 0] = t_next[last]
    g_tau = np.sum(gc[rid] * (t_next[:, None] * e - suffix), axis=1) + gg[rid] * t_final_r[rid]
    g_col = gc[rid] * w[:, None]
    return g_tau, g_col


def composite(sigma, color, delta, offsets, background=WHITE):
    """Emission-absorption compositing of ragged per-ray samples.

    Returns Vars ``(C (R, 3), gamma (R,))`` with
    ``C = sum_i T_i a_i c_i + (1 - gamma) * background``.
    """
    sv, cv = T.value(sigma), T.value(color)
    dtype = np.result_type(sv.dtype, cv.dtype)
    delta = np.asarray(delta, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.int64)
    tau = np.ascontiguousarray(sv, dtype=np.float64) * delta
    col = np.ascontiguousarray(cv, dtype=np.float64).reshape(-1, 3)
    bg = float(background)
    R = len(offsets) - 1
    if _accel.use_numba():
        out_c = np.empty((R, 3))
        out_g = np.empty(R)
        trans = np.empty(len(tau))
        _composite_fwd_kernel(tau, col, offsets, bg, out_c, out_g, trans)
    else:
        out_c, out_g, trans = _composite_fwd_numpy(tau, col, offsets, bg)

    packed = np.concatenate([out_c, out_g[:, None]], axis=1).astype(dtype)

    def bw(g):
        g = np.asarray(g, dtype=np.float64)
        gc = np.ascontiguousarray(g[:, :3])
        gg = np.ascontiguousarray(g[:, 3])
        if _accel.use_numba():
            g_tau = np.empty(len(tau))
            g_col = np.empty((len(tau), 3))
            _composite_bwd_kernel(tau, col, offsets, bg, trans, gc, gg, g_tau, g_col)
        else:
            g_tau, g_col = _composite_bwd_numpy(tau, col, offsets, bg, trans, gc, gg)
        return (g_tau * delta).astype(sv.dtype), g_col.astype(cv.dtype).reshape(cv.shape)

    out = T.custom(packed, (sigma, color), bw)
    return T.getitem(out, (slice(None), slice(0, 3))), T.getitem(out, (slice(None), 3))


def composite_weights(sigma, delta, offsets):
    """Per-sample weights ``T_i a_i`` (diagnostics)."""
    tau = np.asarray(sigma, dtype=np.float64) * np.asarray(delta, dtype=np.float64)
    trans = np.exp(-_segment_excl_cumsum(tau, np.asarray(offsets)))
    return trans * (1.0 - np.exp(-tau))


# --- losses -------------------------------------------------------------------------


def loss_color(C, C_gt, eps=HUBER_EPS):
    """Huber with threshold ``eps``, mean over pixels and channels."""
    return T.mean(T.huber(T.sub(C, C_gt), eps))


def _patch(x):
    v = T.value(x)
    if v.ndim == 2:
        side = int(round(np.sqrt(v.shape[0])))
        if side * side != v.shape[0]:
            raise PatchError(f"{v.shape[0]} pixels do not form a square patch")
        return T.reshape(x, (side, side, v.shape[1]))
    return x


def avg_pool(x, k):
    """``k x k`` average pooling of an ``(H, W, C)`` patch (Var-aware)."""
    x = _patch(x)
    H, W, C = T.value(x).shape
    if H % k or W % k:
        raise PatchError(f"patch {H}x{W} not divisible by pooling size {k}")
    return T.mean(T.mean(T.reshape(x, (H // k, k, W // k, k, C)), axis=3), axis=1)


def loss_downsample(C, C_gt, k=4):
    """L1 between ``k x k``-pooled patches: channel sum, mean over pooled pixels."""
    d = T.sub(avg_pool(C, k), avg_pool(C_gt, k))
    return T.mean(T.sum_(T.abs_(d), axis=-1))


def loss_beta(gamma, guard=BETA_GUARD):
    """Mean of ``-gamma log(gamma + guard)``, pushing opacities to 0 or 1."""
    return T.mean(T.mul(T.sub(0.0, gamma), T.log(T.add(gamma, guard))))


def _conv_s2(x, w):
    """3x3 convolution, stride 2, zero padding 1 on an ``(H, W, C)`` Var."""
    xv = T.value(x)
    H, W, C = xv.shape
    Ho, Wo = (H + 1) // 2, (W + 1) // 2
    xp = np.pad(xv, ((1, 1), (1, 1), (0, 0)))
    cols = np.empty((Ho, Wo, 9, C), dtype=xv.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy * 3 + dx] = xp[dy:dy + 2 * Ho:2, dx:dx + 2 * Wo:2]
    cols2 = cols.reshape(Ho * Wo, 9 * C)
    out = (cols2 @ w.reshape(9 * C, -1)).reshape(Ho, Wo, -1)

    def bw(g):
        gcols = (g.reshape(Ho * Wo, -1) @ w.reshape(9 * C, -1).T).reshape(Ho, Wo, 9, C)
        gp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                gp[dy:dy + 2 * Ho:2, dx:dx + 2 * Wo:2] += gcols[:, :, dy * 3 + dx]
        return (gp[1:H + 1, 1:W + 1],)

    return T.custom(out, (x,), bw)


class PerceptualPyramid:
    """Fixed, seeded three-stage random convolution feature extractor (8/16/32 channels)."""

    def __init__(self, widths=(8, 16, 32), seed=1234, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.weights = []
        cin = 3
        for cout in widths:
            std = np.sqrt(2.0 / (9 * cin))
            self.weights.append(rng.normal(0.0, std, size=(3, 3, cin, cout)).astype(dtype))
            cin = cout

    def features(self, x):
        h = _patch(x)
        feats = []
        for w in self.weights:
            h = T.relu(_conv_s2(h, w))
            feats.append(h)
        return feats


_PYRAMID = None


def default_pyramid():
    global _PYRAMID
    if _PYRAMID is None:
        _PYRAMID = PerceptualPyramid()
    return _PYRAMID


def loss_perceptual(C, C_gt, pyramid: PerceptualPyramid | None = None, side=PATCH):
    """Sum over stages of the mean absolute feature difference."""
    pyr = pyramid or default_pyramid()
    a, b = _patch(C), _patch(C_gt)
    if T.value(a).shape[:2] != (side, side) or T.value(b).shape[:2] != (side, side):
        raise PatchError(f"perceptual loss needs {side}x{side} patches")
    total = None
    for fa, fb in zip(pyr.features(a), pyr.features(b)):
        term = T.mean(T.abs_(T.sub(fa, fb)))
        total = term if total is None else T.add(total, term)
    return total


PHASE_A = (1.0, 0.0, 0.0, 0.1)
PHASE_B = (0.0, 0.35, 0.035, 0.1)
LOSS_NAMES = ("color", "perceptual", "downsample", "beta")


def total_loss(parts, lambdas):
    """Weighted sum of the four loss terms; zero-weight terms are skipped."""
    total = T.Var(np.array(0.0, dtype=np.float32))
    for name, lam in zip(LOSS_NAMES, lambdas):
        if lam != 0 and parts.get(name) is not None:
            total = T.add(total, T.mul(lam, parts[name]))
    return total
