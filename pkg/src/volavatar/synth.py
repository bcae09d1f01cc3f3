"""Procedural ground-truth scenes: a rigged textured head rendered as a density shell.

The generator poses the head, adds a small mouth-corner deformation the
rig cannot express (so learned correctives have something to explain),
and renders each view by emission-absorption marching through a thin
shell of density around the posed surface.
"""

from __future__ import annotations

import json
import os
from dataclasses import replace

import numpy as np

from . import bvh as bvh_mod
from .body_model import (HEAD_CENTER, HEAD_RADII, PoseParams, evaluate_template, make_head_rig, save_rig,
                         transfer_rig)
from .dataio import Dataset, FrameCategory, FrameRecord, save_dataset, write_image, write_mask
from .geometry import Camera, TriMesh, bounding_sphere, look_at, save_mesh
from .nets import tape as T
from .raster import to_pixels
from .renderer import composite, image_rays, march
from .tracking import FrameTrack, save_tracks

PRESETS = ("jaw_head", "rigid_blob")
SHELL_SIGMA = 350.0
SHELL_HALF = 0.02
N_SAMPLES = 128
PRUNE_RADIUS = 0.05
CAM_DIST = 2.6
JAW_MAX = np.deg2rad(20.0)
HIDDEN_MAX = 0.025


def _smooth(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def _dir_point(x, y, z=1.0):
    d = np.array([x, y, z], dtype=np.float64)
    return HEAD_CENTER + HEAD_RADII * d / np.linalg.norm(d)


def _blob(v, c, s):
    return np.exp(-np.sum((v - c) ** 2, axis=-1) / (2 * s * s))


def head_colors(v):
    """Smooth procedural texture: skin, hair cap, brows, eyes, lips."""
    v = np.asarray(v, dtype=np.float64)
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    skin = np.array([0.87, 0.68, 0.57])
    col = skin[None] * (0.92 + 0.08 * np.sin(3.0 * x + 2.0 * y)[:, None])
    hair = _smooth(0.28, 0.40, y + 0.25 * _smooth(0.1, -0.3, z)) * _smooth(0.35, 0.1, z + 0.3 * (y < 0.3))
    hair = np.maximum(hair, _smooth(-0.05, -0.3, z) * _smooth(-0.25, 0.0, y))
    col = col * (1 - hair[:, None]) + np.array([0.25, 0.16, 0.10])[None] * hair[:, None]
    for sx in (-1, 1):
        eye = _blob(v, _dir_point(0.3 * sx, 0.2), 0.035)
        col = col * (1 - eye[:, None]) + np.array([0.12, 0.18, 0.30])[None] * eye[:, None]
        brow = _blob(v, _dir_point(0.3 * sx, 0.34), 0.04) * 0.9
        col = col * (1 - brow[:, None]) + np.array([0.30, 0.20, 0.12])[None] * brow[:, None]
        cheek = _blob(v, _dir_point(0.45 * sx, -0.05), 0.07) * 0.4
        col = col * (1 - cheek[:, None]) + np.array([0.90, 0.50, 0.50])[None] * cheek[:, None]
    lips = _blob(v * [0.45, 1, 1], _dir_point(0.0, -0.2) * [0.45, 1, 1], 0.045) * 0.95
    col = col * (1 - lips[:, None]) + np.array([0.75, 0.20, 0.22])[None] * lips[:, None]
    nose = _blob(v, _dir_point(0.0, 0.0), 0.05) * 0.25
    col = col * (1 - nose[:, None]) + np.array([0.95, 0.75, 0.65])[None] * nose[:, None]
    return np.clip(col, 0.0, 1.0)


def hidden_offsets(rest_vertices, params: PoseParams):
    """Generator-only deformation: mouth corners widen with jaw opening and psi[0].

    Computed on rest positions so it travels with the skinned surface;
    magnitude never exceeds ``HIDDEN_MAX``.
    """
    s = np.clip(0.6 * params.theta_jaw[0] / 0.35 + 0.4 * np.tanh(params.psi[0] if len(params.psi) else 0.0), -1, 1)
    out = np.zeros_like(rest_vertices)
    for sx in (-1, 1):
        g = _blob(rest_vertices, _dir_point(0.28 * sx, -0.2), 0.07)
        out[:, 0] += HIDDEN_MAX * s * sx * g
    return out


def posed_scene(template, params: PoseParams):
    """Posed template plus the hidden deformation (the ground-truth surface).

    The offsets are applied at rest so they travel with the skinned surface.
    """
    moved = template.rest.vertices + hidden_offsets(template.rest.vertices, params)
    return evaluate_template(replace(template, rest=template.rest.with_vertices(moved)), params)


def shell_density(d):
    """Smooth bump ``sigma0 (1 - (d/h)^2)^2`` inside the shell, zero outside."""
    q = np.clip(np.asarray(d) / SHELL_HALF, 0.0, 1.0)
    return SHELL_SIGMA * (1 - q * q) ** 2


def scene_sphere(mesh: TriMesh, pad=PRUNE_RADIUS):
    c, r = bounding_sphere(mesh)
    return c, r + pad


def render_shell(mesh: TriMesh, cam: Camera, n_max=N_SAMPLES, radius=PRUNE_RADIUS, sphere=None):
    """Ground-truth image ``(H, W, 3)`` and opacity ``(H, W)`` of the density shell."""
    tree = bvh_mod.build(mesh)
    rays = image_rays(cam, sphere or scene_sphere(mesh, radius))
    offsets, t, delta, pts, hit, rr = march(rays, tree, n_max, radius)
    sigma = shell_density(hit.distance)
    tri = mesh.triangles[hit.triangle]
    col = np.einsum("nk,nkc->nc", hit.bary, mesh.colors[tri])
    C, g = composite(sigma, col, delta, offsets)
    H, W = cam.height, cam.width
    return T.value(C).reshape(H, W, 3), T.value(g).reshape(H, W)


def ring_camera(azimuth, elevation, size, focal_factor=1.8, dist=CAM_DIST):
    eye = HEAD_CENTER + dist * np.array([np.sin(azimuth) * np.cos(elevation), np.sin(elevation),
                                         np.cos(azimuth) * np.cos(elevation)])
    f = focal_factor * size
    return Camera(look_at(eye, HEAD_CENTER), f, f, size / 2.0, size / 2.0, size, size)


def expression_table(n, n_expr, rng):
    """Predefined expression/viseme states: (jaw angle, psi)."""
    jaws = np.array([0.30, 0.05, 0.18, 0.0, 0.25, 0.10, 0.34, 0.02])
    out = []
    for i in range(n):
        psi = np.zeros(n_expr)
        psi[:4] = rng.uniform(-1.0, 1.0, 4)
        psi[4:] = rng.uniform(-0.4, 0.4, n_expr - 4)
        out.append((jaws[i % len(jaws)], psi))
    return out


def plan_frames(preset, n_frames, n_expr, seed, n_static=None, n_expression=None, n_test=1):
    """Categories, cameras (as angles) and ground-truth parameters per frame."""
    rng = np.random.default_rng(seed)
    n_static = max(1, n_frames // 5) if n_static is None else n_static
    n_expression = max(1, n_frames // 5) if n_expression is None else n_expression
    n_talk = n_frames - n_static - n_expression
    if n_talk < 0:
        raise ValueError("more static and expression frames than frames")
    plan = []
    zero = (0.0, np.zeros(n_expr))
    for i in range(n_static):
        plan.append((FrameCategory.STATIC360, 2 * np.pi * i / n_static, 0.15, zero, "train"))
    exprs = expression_table(n_expression, n_expr, rng)
    for i, e in enumerate(exprs):
        az = np.deg2rad(-20 + 40 * (i + 0.5) / n_expression)
        plan.append((FrameCategory.EXPRESSION_FRONTAL, az, 0.05, e, "train"))
    talk = []
    for i in range(n_talk):
        s = i / max(n_talk - 1, 1)
        psi = np.zeros(n_expr)
        psi[:3] = 0.5 * np.sin(2 * np.pi * s + np.array([0.0, 1.0, 2.0]))
        talk.append((JAW_MAX * s, psi))
        az = np.deg2rad(-15 + 30 * ((7 * i) % max(n_talk, 1)) / max(n_talk, 1))
        plan.append((FrameCategory.TALKING_FRONTAL, az, 0.0, talk[-1], "train"))
    # held-out states interpolate between trained ones
    pool = exprs or talk or [zero]
    for i in range(n_test):
        a, b = pool[i % len(pool)], pool[(i + 1) % len(pool)]
        mid = (0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]))
        plan.append((FrameCategory.EXPRESSION_FRONTAL, np.deg2rad(5.0 * (i + 1)), 0.03, mid, "test"))
    if preset == "rigid_blob":
        plan = [(c, az, el, zero, sp) for c, az, el, _, sp in plan]
    return plan


def build_head(n_expr=10):
    """Model rig, textured scan and the exactly transferred template."""
    model = make_head_rig(n_expr=n_expr)
    scan = TriMesh(model.rest.vertices, model.rest.triangles, head_colors(model.rest.vertices), model.rest.labels)
    template = transfer_rig(model, scan, PoseParams.zeros(model))
    return model, scan, template


def synth_generate(preset, frames, seed, out, size=64, n_static=None, n_expression=None, n_test=1,
                   jaw_override=None) -> Dataset:
    """Write a synthetic dataset to ``out`` and return it.

    ``jaw_override`` replaces every frame's jaw angle (radians, one value per
    frame including test frames), e.g. for a pure jaw ramp.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    if size < 8 or size & (size - 1):
        raise ValueError("image size must be a power of two >= 8")
    os.makedirs(os.path.join(out, "images"), exist_ok=True)
    os.makedirs(os.path.join(out, "masks"), exist_ok=True)
    model, scan, template = build_head()
    save_rig(model, os.path.join(out, "model.rig"))
    save_rig(template, os.path.join(out, "template.rig"))
    save_mesh(scan, os.path.join(out, "scan.obj"))
    np.savetxt(os.path.join(out, "scan_landmarks.txt"), scan.vertices[model.landmarks], fmt="%.9g")
    plan = plan_frames(preset, frames, template.n_expr, seed, n_static, n_expression, n_test)
    records, gt = [], []
    for i, (cat, az, el, (jaw, psi), split) in enumerate(plan):
        if jaw_override is not None:
            jaw = float(jaw_override[i])
        params = PoseParams(np.zeros((template.n_body_joints, 3)), np.array([jaw, 0.0, 0.0]), np.zeros(0), psi)
        cam = ring_camera(az, el, size)
        mesh = posed_scene(template, params)
        img, gamma = render_shell(mesh, cam)
        name = f"{i:04d}.png"
        write_image(os.path.join(out, "images", name), img)
        write_mask(os.path.join(out, "masks", name), (gamma > 0.5).astype(np.float64))
        lm, _ = to_pixels(cam, mesh.vertices[template.landmarks])
        records.append(FrameRecord(i, f"images/{name}", cam, cat, f"masks/{name}", lm, params, split))
        gt.append(FrameTrack(i, params))
    save_tracks(os.path.join(out, "ground_truth.txt"), gt)
    ds = Dataset(os.path.abspath(out), size, size, records, rig="template.rig", tracks=None,
                 extra={"ground_truth": "ground_truth.txt", "preset": preset, "seed": int(seed)})
    save_dataset(ds)
    with open(os.path.join(out, "README.txt"), "w") as fh:
        fh.write(json.dumps({"preset": preset, "frames": frames, "seed": seed, "size": size}) + "\n")
    return ds
