"""Coarse mesh-driven warp, blended displacement fields and the weight mapping net."""

from __future__ import annotations

import numpy as np

from . import bvh as bvh_mod
from .encoding import HashGrid, freq_encode
from .geometry import FACE, TriMesh
from .nets import Mlp
from .nets import tape as T


class MissingLabelsError(ValueError):
    pass


def triangle_frames(mesh: TriMesh):
    """Per-triangle origin ``v0`` and frame ``[e1, e2, n]`` (columns, unit normal)."""
    c = mesh.corners()
    o = c[:, 0]
    e1 = c[:, 1] - o
    e2 = c[:, 2] - o
    n = np.cross(e1, e2)
    nl = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.where(nl > 0, nl, 1.0)
    F = np.stack([e1, e2, n], axis=2)
    return o, F


class CoarseField:
    """Warp from the deformed coarse mesh back to its canonical pose.

    A point is carried by its nearest deformed triangle:
    ``x = F_c F_d^-1 (x_d - o_d) + o_c``; triangles with a near-singular
    frame in either pose fall back to a pure translation.
    """

    def __init__(self, canonical: TriMesh, deformed: TriMesh):
        if canonical.n_triangles != deformed.n_triangles or canonical.n_vertices != deformed.n_vertices:
            raise ValueError("canonical and deformed coarse meshes must share topology")
        if not np.array_equal(canonical.triangles, deformed.triangles):
            raise ValueError("canonical and deformed coarse meshes must share triangles")
        self.canonical = canonical
        self.deformed = deformed
        self.bvh = bvh_mod.build(deformed)
        self.o_c, F_c = triangle_frames(canonical)
        self.o_d, F_d = triangle_frames(deformed)
        det_c = np.linalg.det(F_c)
        det_d = np.linalg.det(F_d)
        self.degenerate = (np.abs(det_c) <= 1e-12) | (np.abs(det_d) <= 1e-12)
        A = np.tile(np.eye(3), (len(F_c), 1, 1))
        ok = ~self.degenerate
        A[ok] = F_c[ok] @ np.linalg.inv(F_d[ok])
        self.A = A

    def __call__(self, x_d):
        return coarse_deform(self, x_d)


def coarse_deform(field: CoarseField, x_d):
    """Canonical points and nearest hits for deformed points ``(N, 3)``."""
    x_d = np.asarray(x_d, dtype=np.float64).reshape(-1, 3)
    hit = bvh_mod.nearest_triangles(field.bvh, x_d)
    t = hit.triangle
    rel = x_d - field.o_d[t]
    x = np.einsum("nab,nb->na", field.A[t], rel) + field.o_c[t]
    return x, hit


def face_gate(field: CoarseField, hit) -> np.ndarray:
    """Fraction of FACE vertices on each hit's triangle (1, 0 or linear in between)."""
    labels = field.canonical.labels
    if labels is None:
        raise MissingLabelsError("coarse mesh carries no FACE labels")
    tri = np.asarray(hit.triangle if hasattr(hit, "triangle") else hit)
    corners = field.canonical.triangles[tri]
    return np.mean(labels[corners] == FACE, axis=-1)


class BlendFieldBasis:
    """``K + 1`` hash grids sharing one displacement MLP.

    ``d_i(x) = D(h_i(x))`` and ``dx = d_0 + sum_i w_i d_i``. The MLP's last
    layer starts at zero, so every displacement starts at exactly zero.
    """

    def __init__(self, k=11, grid_kw=None, hidden=(128, 128, 128), seed=0, dtype=np.float32):
        self.k = int(k)
        grid_kw = dict(grid_kw or {})
        self.grids = [HashGrid(seed=seed * 1000 + 17 + i, dtype=dtype, **grid_kw) for i in range(self.k + 1)]
        widths = [self.grids[0].out_dim, *hidden, 3]
        self.mlp = Mlp(widths, out_act=None, zero_last=True, seed=seed + 5, dtype=dtype, name="deform")

    @property
    def params(self):
        out = dict(self.mlp.params)
        for i, g in enumerate(self.grids):
            out[f"blend.grid{i}"] = g.table
        return out

    def grid_params(self):
        return {f"blend.grid{i}": g.table for i, g in enumerate(self.grids)}

    def features(self, x, tape=None):
        """Stacked per-grid encodings, shape ``(K+1, N, L*F)`` (Var)."""
        return T.stack([g(x, tape) for g in self.grids], axis=0)

    def displacements(self, x, tape=None):
        """Per-field displacements ``d_i(x)``, shape ``(K+1, N, 3)`` (Var)."""
        feats = self.features(x, tape)
        kk, n, f = T.value(feats).shape
        d = self.mlp(T.reshape(feats, (kk * n, f)), tape)
        return T.reshape(d, (kk, n, 3))


def blend_displacement(basis: BlendFieldBasis, x, w, tape=None):
    """``dx = d_0(x) + sum_i w_i d_i(x)`` as a Var of shape ``(N, 3)``.

    ``w`` may be a Var (per-frame weights under training).
    """
    wv = T.value(w)
    if np.ndim(wv) != 1 or len(wv) != basis.k:
        raise ValueError(f"blend weights must have length K={basis.k}, got shape {np.shape(wv)}")
    d = basis.displacements(x, tape)
    dtype = T.value(d).dtype
    coef = T.concat([np.ones(1, dtype=dtype), w if isinstance(w, T.Var) else np.asarray(w, dtype=dtype)], axis=0)
    return T.einsum("k,knc->nc", coef, d)


def blend_features(basis: BlendFieldBasis, x, w, tape=None):
    """Weighted sum of the grid encodings themselves (appearance-blending variant)."""
    feats = basis.features(x, tape)
    dtype = T.value(feats).dtype
    coef = T.concat([np.ones(1, dtype=dtype), w if isinstance(w, T.Var) else np.asarray(w, dtype=dtype)], axis=0)
    return T.einsum("k,knf->nf", coef, feats)


class MappingNet:
    """Regressor from ``(theta_jaw, psi[:10])`` to blend weights ``w``."""

    def __init__(self, k=11, n_psi=10, n_freqs=10, hidden=(128, 128, 128), seed=0, dtype=np.float32):
        self.k, self.n_psi, self.n_freqs = int(k), int(n_psi), int(n_freqs)
        in_dim = (3 + self.n_psi) * 2 * self.n_freqs
        self.mlp = Mlp([in_dim, *hidden, self.k], out_act=None, zero_last=True, seed=seed, dtype=dtype, name="mapping")
        self.dtype = dtype

    @property
    def params(self):
        return self.mlp.params

    def encode(self, theta_jaw, psi):
        theta_jaw = np.asarray(theta_jaw, dtype=np.float64)
        psi = np.asarray(psi, dtype=np.float64)
        single = theta_jaw.ndim == 1
        tj = theta_jaw.reshape(-1, 3)
        ps = psi.reshape(len(tj), -1)
        if ps.shape[1] < self.n_psi:
            raise ValueError(f"psi needs at least {self.n_psi} components, got {ps.shape[1]}")
        v = np.concatenate([tj, ps[:, :self.n_psi]], axis=1)
        return freq_encode(v, self.n_freqs).astype(self.dtype), single

    def __call__(self, theta_jaw, psi, tape=None):
        enc, single = self.encode(theta_jaw, psi)
        out = self.mlp(enc, tape)
        return out if tape is not None else (T.value(out)[0] if single else T.value(out))


def map_weights(net: MappingNet, theta_jaw, psi):
    return net(theta_jaw, psi)
