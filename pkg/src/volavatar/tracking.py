"""Per-frame fitting of jaw, body pose and expression to video frames."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .body_model import PoseParams, RiggedTemplate, skin
from .geometry import Camera
from .nets import Adam, halving
from .nets import tape as T
from .raster import rasterize, visible_vertices

TRACK_HEADER = "# volavatar-tracks v1"


class TrackingError(RuntimeError):
    pass


class NoVisibleVerticesError(TrackingError):
    pass


class TrackFileError(ValueError):
    pass


@dataclass
class TrackConfig:
    lambda_photo: float = 1.0
    lambda_land: float = 0.001
    lambda_temp: float = 4.0
    lambda_pose: float = 0.1
    lambda_exp: float = 0.1
    lr: float = 8e-4
    lr_halving: int = 200
    blur_sigma: float = 2.0
    iters: int = 150
    lower_body_weight: float = 100.0
    # landmark pixel errors are measured as if the image were this wide,
    # so the landmark weight does not depend on the working resolution
    landmark_ref_width: float = 512.0
    min_cos: float = 0.1

    def __post_init__(self):
        ws = (self.lambda_photo, self.lambda_land, self.lambda_temp, self.lambda_pose, self.lambda_exp)
        if min(ws) < 0:
            raise ValueError("tracking weights must be non-negative")
        if self.blur_sigma < 0:
            raise ValueError("blur sigma must be non-negative")


@dataclass
class FrameTrack:
    frame: int
    params: PoseParams
    energies: dict = field(default_factory=dict)


@dataclass
class TrackInput:
    frame: int
    camera: Camera
    image: np.ndarray
    landmarks: np.ndarray | None = None


def blur(image, sigma):
    if sigma <= 0:
        return np.asarray(image, dtype=np.float64)
    img = np.asarray(image, dtype=np.float64)
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")


def _project_var(cam: Camera, pts):
    """Pinhole projection of a Var point set to continuous pixel coords."""
    R = cam.c2w[:3, :3]
    C = cam.c2w[:3, 3]
    pc = T.matmul(T.sub(pts, C), R)
    x = T.getitem(pc, (slice(None), 0))
    y = T.getitem(pc, (slice(None), 1))
    z = T.getitem(pc, (slice(None), 2))
    if np.any(T.value(z) <= 1e-9):
        from .geometry import BehindCameraError
        raise BehindCameraError("point behind camera during projection")
    u = T.add(T.mul(cam.fl_x, T.div(x, z)), cam.cx)
    v = T.add(T.mul(cam.fl_y, T.div(y, z)), cam.cy)
    return T.stack([u, v], axis=1)


def _posed(rig, vars_):
    theta_body, theta_jaw, psi = vars_
    return skin(rig, theta_body, theta_jaw, None, psi)


def reference_colors(rig, params: PoseParams, cam: Camera, sigma, visible):
    """Per-vertex target colors: raw vertex colors, or with ``sigma > 0`` the
    blurred rasterized template sampled at each vertex's projection."""
    if rig.rest.colors is None:
        raise TrackingError("template has no vertex colors")
    if sigma <= 0:
        return rig.rest.colors[visible]
    mesh = rig.rest.with_vertices(T.value(_posed(rig, _vars(None, params))))
    img, _, _ = rasterize(mesh, cam)
    uv = T.value(_project_var(cam, mesh.vertices[visible]))
    return T.value(T.bilinear_sample(blur(img, sigma), uv - 0.5))


def _photo_term(rig, verts, cam, image, visible, ref):
    if len(visible) == 0:
        raise NoVisibleVerticesError("no visible vertices for the photometric term")
    uv = _project_var(cam, T.take(verts, visible, axis=0))
    sampled = T.bilinear_sample(image, T.sub(uv, 0.5))
    return T.mean(T.square(T.sub(sampled, ref)))


def _land_term(rig, verts, cam, detections, ref_scale):
    det = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
    if len(det) != len(rig.landmarks):
        raise ValueError(f"{len(det)} detections for {len(rig.landmarks)} landmarks")
    uv = _project_var(cam, T.take(verts, rig.landmarks, axis=0))
    d = T.mul(T.sub(uv, det), ref_scale)
    return T.mean(T.sum_(T.square(d), axis=1))


def _vars(tape, params):
    if tape is None:
        return params.theta_body, params.theta_jaw, params.psi
    return tape.leaf(params.theta_body), tape.leaf(params.theta_jaw), tape.leaf(params.psi)


def _with_grad(fn, params, grad):
    if not grad:
        return float(T.value(fn(_vars(None, params))))
    tape = T.Tape()
    vs = _vars(tape, params)
    e = fn(vs)
    tape.backward(e)
    names = ("theta_body", "theta_jaw", "psi")
    return float(T.value(e)), {n: (v.grad if v.grad is not None else np.zeros_like(v.value)) for n, v in zip(names, vs)}


def photometric_energy(rig: RiggedTemplate, params: PoseParams, cam: Camera, image, visible=None, grad=False,
                       min_cos=0.1, sigma=0.0, ref=None):
    """Mean squared color error of visible vertices against the image.

    ``image`` is expected pre-blurred with ``sigma``; the vertex targets
    are blurred the same way (see :func:`reference_colors`). ``visible``
    and ``ref`` fix the vertex set and targets; by default both are
    computed at ``params``. With ``grad=True`` the result is
    ``(energy, {name: gradient})``.
    """
    if visible is None:
        mesh = rig.rest.with_vertices(T.value(_posed(rig, _vars(None, params))))
        visible = visible_vertices(mesh, cam, min_cos=min_cos)
    if ref is None:
        ref = reference_colors(rig, params, cam, sigma, visible)
    return _with_grad(lambda vs: _photo_term(rig, _posed(rig, vs), cam, image, visible, ref), params, grad)


def landmark_energy(rig: RiggedTemplate, params: PoseParams, cam: Camera, detections, grad=False, ref_scale=1.0):
    """Mean squared pixel distance between projected landmarks and detections."""
    return _with_grad(lambda vs: _land_term(rig, _posed(rig, vs), cam, detections, ref_scale), params, grad)


def _reg_terms(rig, vs, prev: PoseParams, cfg: TrackConfig):
    theta_body, theta_jaw, psi = vs
    d_body = T.sub(theta_body, prev.theta_body)
    d_jaw = T.sub(theta_jaw, prev.theta_jaw)
    d_psi = T.sub(psi, prev.psi)
    e_temp = T.add(T.add(T.sum_(T.square(d_body)), T.sum_(T.square(d_jaw))), T.sum_(T.square(d_psi)))
    lower = rig.lower_body[rig.body_joint_ids]
    wj = np.where(lower, cfg.lower_body_weight, 1.0)[:, None]
    # body pose toward zero (lower body strongly), jaw toward the previous frame
    e_pose = T.add(T.sum_(T.mul(wj, T.square(theta_body))), T.sum_(T.square(d_jaw)))
    e_exp = T.sum_(T.square(d_psi))
    return e_temp, e_pose, e_exp


def tracking_energy(rig, vs, prev, cam, image_blurred, detections, visible, ref, cfg: TrackConfig):
    verts = _posed(rig, vs)
    parts = {}
    total = T.Var(np.array(0.0))
    if cfg.lambda_photo > 0:
        parts["photo"] = _photo_term(rig, verts, cam, image_blurred, visible, ref)
        total = T.add(total, T.mul(cfg.lambda_photo, parts["photo"]))
    if detections is not None and cfg.lambda_land > 0:
        scale = cfg.landmark_ref_width / float(cam.width) if cfg.landmark_ref_width else 1.0
        parts["land"] = _land_term(rig, verts, cam, detections, scale)
        total = T.add(total, T.mul(cfg.lambda_land, parts["land"]))
    e_temp, e_pose, e_exp = _reg_terms(rig, vs, prev, cfg)
    parts.update(temp=e_temp, pose=e_pose, exp=e_exp)
    total = T.add(total, T.mul(cfg.lambda_temp, e_temp))
    total = T.add(total, T.mul(cfg.lambda_pose, e_pose))
    total = T.add(total, T.mul(cfg.lambda_exp, e_exp))
    return total, {k: float(T.value(v)) for k, v in parts.items()}


def track_frame(rig: RiggedTemplate, prev: FrameTrack, cam: Camera, image, landmarks, config: TrackConfig | None = None,
                frame: int | None = None, init: PoseParams | None = None, preblurred=False) -> FrameTrack:
    """Adam on jaw, body pose and expression from ``init`` (default: previous frame).

    Visibility and the blurred reference colors are fixed per frame from
    the initial pose. The returned
    parameters are the lowest-energy iterate seen; beta is never touched.
    """
    cfg = config or TrackConfig()
    idx = prev.frame + 1 if frame is None else frame
    img = np.asarray(image, dtype=np.float64) if preblurred else blur(image, cfg.blur_sigma)
    start = (init or prev.params).copy()
    params = {"theta_body": start.theta_body, "theta_jaw": start.theta_jaw, "psi": start.psi}
    mesh = rig.rest.with_vertices(T.value(_posed(rig, (start.theta_body, start.theta_jaw, start.psi))))
    visible = visible_vertices(mesh, cam, min_cos=cfg.min_cos)
    ref = reference_colors(rig, start, cam, cfg.blur_sigma, visible)
    opt = Adam({"track": (params, cfg.lr)}, schedule=halving(cfg.lr_halving))
    best_e, best = np.inf, None
    for it in range(cfg.iters + 1):
        tape = T.Tape()
        vs = tuple(tape.param(params[k]) for k in ("theta_body", "theta_jaw", "psi"))
        total, parts = tracking_energy(rig, vs, prev.params, cam, img, landmarks, visible, ref, cfg)
        e = float(T.value(total))
        if not np.isfinite(e):
            raise TrackingError(f"non-finite tracking energy at frame {idx}, iteration {it}: {parts}")
        if e < best_e:
            best_e = e
            best = (PoseParams(params["theta_body"], params["theta_jaw"], start.beta, params["psi"]), parts)
        if it == cfg.iters:
            break
        tape.backward(total)
        opt.step({k: tape.grad_of(params[k]) for k in params})
    p, parts = best
    return FrameTrack(idx, p.copy(), dict(parts, total=best_e))


def track_sequence(rig: RiggedTemplate, frames, config: TrackConfig | None = None,
                   init: PoseParams | None = None, path=None):
    """Track time-ordered frames, each initialized from the previous result.

    ``frames`` is an iterable of :class:`TrackInput` (or objects with
    ``frame``, ``camera``, ``image`` and ``landmarks``).
    """
    cfg = config or TrackConfig()
    p0 = init or PoseParams(np.zeros((rig.n_body_joints, 3)), np.zeros(3), np.zeros(rig.n_shape), np.zeros(rig.n_expr))
    out = []
    prev = None
    for fr in frames:
        if prev is None:
            prev = FrameTrack(fr.frame - 1, p0)
        try:
            cur = track_frame(rig, prev, fr.camera, fr.image, fr.landmarks, cfg, frame=fr.frame)
        except (TrackingError, ValueError) as e:
            raise TrackingError(f"tracking failed at frame {fr.frame}: {e}") from e
        out.append(cur)
        prev = cur
    if path is not None:
        save_tracks(path, out)
    return out


# --- tracked-parameter file ----------------------------------------------------


def save_tracks(path, tracks):
    if not tracks:
        raise TrackFileError("no tracks to save")
    p = tracks[0].params
    lines = [TRACK_HEADER, f"dims body_joints={len(p.theta_body)} expr={len(p.psi)} shape={len(p.beta)}",
             "# frame | theta_jaw(3) | theta_body(3 per joint) | psi | beta"]
    for tr in sorted(tracks, key=lambda t: t.frame):
        q = tr.params
        vals = np.concatenate([q.theta_jaw, q.theta_body.ravel(), q.psi, q.beta])
        lines.append(f"{tr.frame} " + " ".join(repr(float(v)) for v in vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_tracks(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != TRACK_HEADER:
        raise TrackFileError(f"{path}: missing '{TRACK_HEADER}' header")
    dims = None
    out = []
    for no, ln in enumerate(lines[1:], start=2):
        if not ln or ln.startswith("#"):
            continue
        if ln.startswith("dims"):
            dims = dict(kv.split("=") for kv in ln.split()[1:])
            nb, ne, ns = int(dims["body_joints"]), int(dims["expr"]), int(dims.get("shape", 0))
            continue
        if dims is None:
            raise TrackFileError(f"{path}:{no}: record before dims line")
        parts = ln.split()
        vals = np.array([float(v) for v in parts[1:]])
        if len(vals) != 3 + 3 * nb + ne + ns:
            raise TrackFileError(f"{path}:{no}: expected {3 + 3 * nb + ne + ns} values, got {len(vals)}")
        jaw = vals[:3]
        body = vals[3:3 + 3 * nb].reshape(nb, 3)
        psi = vals[3 + 3 * nb:3 + 3 * nb + ne]
        beta = vals[3 + 3 * nb + ne:]
        out.append(FrameTrack(int(parts[0]), PoseParams(body, jaw, beta, psi)))
    return out
