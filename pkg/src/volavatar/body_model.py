"""Skinned parametric model, rig transfer to a scan, and the rig file format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import FACE, NON_FACE, TriMesh
from .nets import tape as T

RIG_MAGIC = b"RIG1"


class RigFormatError(ValueError):
    pass


class RigInvariantError(ValueError):
    pass


class DimensionError(ValueError):
    pass


class MisalignmentError(ValueError):
    pass


@dataclass
class PoseParams:
    theta_body: np.ndarray  # (Jb, 3) axis-angle of every non-jaw joint, joint order
    theta_jaw: np.ndarray  # (3,)
    beta: np.ndarray  # (B,)
    psi: np.ndarray  # (E,)

    def __post_init__(self):
        self.theta_body = np.asarray(self.theta_body, dtype=np.float64).reshape(-1, 3)
        self.theta_jaw = np.asarray(self.theta_jaw, dtype=np.float64).reshape(3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        for name in ("theta_body", "theta_jaw", "beta", "psi"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite {name}")

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros((model.n_body_joints, 3)), np.zeros(3), np.zeros(model.n_shape), np.zeros(model.n_expr))

    def copy(self):
        return PoseParams(self.theta_body.copy(), self.theta_jaw.copy(), self.beta.copy(), self.psi.copy())

    def with_(self, **kw):
        return replace(self.copy(), **kw)


@dataclass
class Similarity:
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not self.scale > 0:
            raise ValueError("similarity scale must be positive")

    def apply(self, x):
        return self.scale * np.asarray(x) @ self.rotation.T + self.translation

    def to_dict(self):
        return {"scale": float(self.scale), "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["scale"], np.array(d["rotation"]), np.array(d["translation"]))


@dataclass
class SkinnedModel:
    rest: TriMesh
    parents: np.ndarray  # (J,), -1 for the root
    joints: np.ndarray  # (J, 3) rest-pose joint locations
    weights: np.ndarray  # (V, J)
    shapedirs: np.ndarray  # (V, 3, B)
    exprdirs: np.ndarray  # (V, 3, E)
    landmarks: np.ndarray  # (K,) vertex indices
    jaw_joint: int = -1
    lower_body: np.ndarray | None = None  # (J,) bool, joints pinned by the lower-body regularizer

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        V = self.rest.n_vertices
        self.shapedirs = np.asarray(self.shapedirs, dtype=np.float64).reshape(V, 3, -1)
        self.exprdirs = np.asarray(self.exprdirs, dtype=np.float64).reshape(V, 3, -1)
        self.landmarks = np.asarray(self.landmarks, dtype=np.int64).reshape(-1)
        if self.lower_body is None:
            self.lower_body = np.zeros(len(self.parents), dtype=bool)
        self.lower_body = np.asarray(self.lower_body, dtype=bool).reshape(-1)
        self.jaw_joint = int(self.jaw_joint)
        self.validate()

    # dimensions ----------------------------------------------------------------
    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def n_body_joints(self):
        return self.n_joints - (1 if self.jaw_joint >= 0 else 0)

    @property
    def body_joint_ids(self):
        return np.array([j for j in range(self.n_joints) if j != self.jaw_joint], dtype=np.int64)

    @property
    def n_shape(self):
        return self.shapedirs.shape[2]

    @property
    def n_expr(self):
        return self.exprdirs.shape[2]

    @property
    def face_labels(self):
        return self.rest.labels

    def validate(self):
        V, J = self.rest.n_vertices, self.n_joints
        if self.weights.shape != (V, J):
            raise RigInvariantError(f"weights shape {self.weights.shape} != ({V}, {J})")
        if np.any(self.weights < 0):
            raise RigInvariantError("skinning weights must be non-negative")
        rowsum = self.weights.sum(axis=1)
        if np.any(np.abs(rowsum - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(rowsum - 1.0)))
            raise RigInvariantError(f"skinning weight row {bad} sums to {rowsum[bad]:.6g}, not 1")
        if J == 0 or self.parents[0] != -1 or np.count_nonzero(self.parents < 0) != 1:
            raise RigInvariantError("joint tree must have exactly one root, at index 0")
        if np.any(self.parents[1:] >= np.arange(1, J)) or np.any(self.parents[1:] < 0):
            raise RigInvariantError("joint parents must precede their children")
        if self.joints.shape != (J, 3):
            raise RigInvariantError("joint location array does not match the tree")
        if not (-1 <= self.jaw_joint < J) or self.jaw_joint == 0:
            raise RigInvariantError("jaw joint index out of range (the root cannot be the jaw)")
        if len(self.lower_body) != J:
            raise RigInvariantError("lower-body flags do not match the joint count")
        if len(self.landmarks) and (self.landmarks.min() < 0 or self.landmarks.max() >= V):
            raise RigInvariantError("landmark vertex index out of range")
        if self.rest.labels is None:
            raise RigInvariantError("face-region labels are required")
        if not np.all(np.isin(self.rest.labels, (FACE, NON_FACE))):
            raise RigInvariantError("face labels must be FACE or NON_FACE")

    def check_params(self, params: PoseParams, need_beta=True):
        if params.theta_body.shape != (self.n_body_joints, 3):
            raise DimensionError(f"theta_body has shape {params.theta_body.shape}, rig needs ({self.n_body_joints}, 3)")
        if need_beta and len(params.beta) != self.n_shape:
            raise DimensionError(f"beta has {len(params.beta)} values, rig needs {self.n_shape}")
        if len(params.psi) != self.n_expr:
            raise DimensionError(f"psi has {len(params.psi)} values, rig needs {self.n_expr}")


@dataclass
class RiggedTemplate(SkinnedModel):
    correspondence: np.ndarray | None = None  # (V_scan,) model vertex each scan vertex copied from
    registration: dict | None = None


# --- linear blend skinning -------------------------------------------------------


def full_pose(model: SkinnedModel, theta_body, theta_jaw):
    """Stack body and jaw rotations into a (J, 3) per-joint array (tape-aware)."""
    if model.jaw_joint < 0:
        return theta_body
    rows = []
    jb = 0
    for j in range(model.n_joints):
        if j == model.jaw_joint:
            rows.append(T.reshape(theta_jaw, (1, 3)))
        else:
            rows.append(T.getitem(theta_body, slice(jb, jb + 1)) if isinstance(theta_body, T.Var)
                        else np.asarray(theta_body)[jb:jb + 1])
            jb += 1
    return T.concat(rows, axis=0)


def joint_transforms(model: SkinnedModel, pose):
    """Global (A_j, t_j) per joint so that posed(x) = A_j x + t_j (tape-aware)."""
    R = T.rodrigues(pose)  # (J, 3, 3)
    A, t = [], []
    for j in range(model.n_joints):
        Rj = T.getitem(R, j) if isinstance(R, T.Var) else R[j]
        Jj = model.joints[j]
        local_t = Jj - T.matmul(Rj, Jj)
        p = model.parents[j]
        if p < 0:
            A.append(Rj)
            t.append(local_t)
        else:
            A.append(T.matmul(A[p], Rj))
            t.append(T.add(T.matmul(A[p], local_t), t[p]))
    return T.stack(A, axis=0), T.stack(t, axis=0)


def skin(model: SkinnedModel, theta_body, theta_jaw, beta=None, psi=None, weights=None):
    """Posed vertices ``(V, 3)`` as a Var; every argument may be a Var.

    Uses ``v + sum_j w_j ((A_j - I) v + t_j)``, which equals the usual
    weighted rigid blend for normalized weights and returns the shaped
    rest pose bit-exactly at zero pose.
    """
    v = model.rest.vertices
    if beta is not None and model.n_shape:
        v = T.add(v, T.einsum("vcb,b->vc", model.shapedirs, beta))
    if psi is not None and model.n_expr:
        v = T.add(v, T.einsum("vce,e->vc", model.exprdirs, psi))
    W = model.weights if weights is None else weights
    A, t = joint_transforms(model, full_pose(model, theta_body, theta_jaw))
    Am = T.sub(A, np.eye(3))
    M = T.einsum("vj,jab->vab", W, Am)
    offset = T.add(T.einsum("vab,vb->va", M, v), T.matmul(W, t))
    return T.add(v, offset)


def evaluate(model: SkinnedModel, params: PoseParams) -> TriMesh:
    model.check_params(params)
    v = skin(model, params.theta_body, params.theta_jaw, params.beta, params.psi)
    return model.rest.with_vertices(T.value(v))


def evaluate_template(rig: RiggedTemplate, params: PoseParams) -> TriMesh:
    """Posed scan; ``beta`` is ignored because the scan already carries the shape."""
    rig.check_params(params, need_beta=False)
    v = skin(rig, params.theta_body, params.theta_jaw, None, params.psi)
    return rig.rest.with_vertices(T.value(v))


def posed_joints(model: SkinnedModel, params: PoseParams):
    A, t = joint_transforms(model, full_pose(model, params.theta_body, params.theta_jaw))
    A, t = T.value(A), T.value(t)
    return np.einsum("jab,jb->ja", A, model.joints) + t


# --- rig transfer ----------------------------------------------------------------


def nearest_lowest(tree_points, queries, k=8):
    """Index of the nearest tree point per query, lowest index among exact ties."""
    tree = cKDTree(tree_points)
    k = min(k, len(tree_points))
    d, idx = tree.query(queries, k=k)
    d = d.reshape(len(queries), -1)
    idx = idx.reshape(len(queries), -1)
    tie = d == d[:, :1]
    return np.where(tie, idx, np.iinfo(np.int64).max).min(axis=1), d[:, 0]


def transfer_rig(model: SkinnedModel, scan: TriMesh, params: PoseParams, similarity: Similarity | None = None,
                 max_median_dist=0.1) -> RiggedTemplate:
    """Give every scan vertex the rig data of its nearest posed-model vertex."""
    sim = similarity or Similarity()
    posed = sim.apply(evaluate(model, params).vertices)
    corr, dist = nearest_lowest(posed, scan.vertices)
    med = float(np.median(dist))
    if med >= max_median_dist:
        raise MisalignmentError(f"median scan-to-model distance {med:.4g} exceeds {max_median_dist}")
    joints = sim.apply(posed_joints(model, params))
    rot = sim.scale * sim.rotation
    exprdirs = np.einsum("ab,vbe->vae", rot, model.exprdirs[corr])
    lm_pos = posed[model.landmarks]
    lm, _ = nearest_lowest(scan.vertices, lm_pos)
    rest = TriMesh(scan.vertices, scan.triangles, scan.colors, model.rest.labels[corr])
    reg = {"similarity": sim.to_dict(), "params": pose_to_dict(params)}
    return RiggedTemplate(rest, model.parents.copy(), joints, model.weights[corr], np.zeros((len(corr), 3, 0)),
                          exprdirs, lm, model.jaw_joint, model.lower_body.copy(), correspondence=corr,
                          registration=reg)


def pose_to_dict(p: PoseParams):
    return {"theta_body": p.theta_body.tolist(), "theta_jaw": p.theta_jaw.tolist(),
            "beta": p.beta.tolist(), "psi": p.psi.tolist()}


def pose_from_dict(d):
    return PoseParams(np.array(d["theta_body"]), np.array(d["theta_jaw"]), np.array(d["beta"]), np.array(d["psi"]))


# --- rig file ----------------------------------------------------------------------

_SECTIONS = [
    # name, dtype, attribute getter
    ("vertices", "<f4"),
    ("triangles", "<u4"),
    ("parents", "<i4"),
    ("joints", "<f4"),
    ("lower_body", "u1"),
    ("weights", "<f4"),
    ("shapedirs", "<f4"),
    ("exprdirs", "<f4"),
    ("landmarks", "<u4"),
    ("face_labels", "u1"),
    ("colors", "<f4"),
    ("correspondence", "<u4"),
]


def _section_arrays(rig: SkinnedModel):
    out = {
        "vertices": rig.rest.vertices,
        "triangles": rig.rest.triangles,
        "parents": rig.parents,
        "joints": rig.joints,
        "lower_body": rig.lower_body.astype(np.uint8),
        "weights": rig.weights,
        "shapedirs": rig.shapedirs,
        "exprdirs": rig.exprdirs,
        "landmarks": rig.landmarks,
        "face_labels": rig.rest.labels,
    }
    if rig.rest.colors is not None:
        out["colors"] = rig.rest.colors
    if isinstance(rig, RiggedTemplate) and rig.correspondence is not None:
        out["correspondence"] = rig.correspondence
    return out


def save_rig(rig: SkinnedModel, path):
    arrays = _section_arrays(rig)
    dtypes = dict(_SECTIONS)
    table, chunks, off = [], [], 0
    for name, _ in _SECTIONS:
        if name not in arrays:
            continue
        a = np.ascontiguousarray(np.asarray(arrays[name]).astype(dtypes[name]))
        table.append({"name": name, "dtype": dtypes[name], "shape": list(a.shape), "offset": off, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        off += a.nbytes
    header = {
        "kind": "template" if isinstance(rig, RiggedTemplate) else "model",
        "n_vertices": rig.rest.n_vertices,
        "n_triangles": rig.rest.n_triangles,
        "n_joints": rig.n_joints,
        "n_shape": rig.n_shape,
        "n_expr": rig.n_expr,
        "jaw_joint": rig.jaw_joint,
        "sections": table,
    }
    if isinstance(rig, RiggedTemplate) and rig.registration is not None:
        header["registration"] = rig.registration
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(RIG_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def load_rig(path) -> SkinnedModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != RIG_MAGIC:
        raise RigFormatError("bad magic; not a RIG1 file")
    if len(data) < 8:
        raise RigFormatError("truncated header")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise RigFormatError(f"unreadable header: {e}") from None
    base = 8 + hlen
    arr = {}
    for sec in header.get("sections", []):
        raw = data[base + sec["offset"]:base + sec["offset"] + sec["nbytes"]]
        if len(raw) != sec["nbytes"]:
            raise RigFormatError(f"truncated section {sec['name']}")
        arr[sec["name"]] = np.frombuffer(raw, dtype=np.dtype(sec["dtype"])).reshape(sec["shape"]).copy()
    required = ["vertices", "triangles", "parents", "joints", "lower_body", "weights", "shapedirs", "exprdirs",
                "landmarks", "face_labels"]
    missing = [r for r in required if r not in arr]
    if missing:
        raise RigFormatError(f"missing sections: {', '.join(missing)}")
    V = header["n_vertices"]
    if arr["vertices"].shape != (V, 3) or arr["weights"].shape[0] != V:
        raise RigFormatError("section shapes disagree with the header")
    rest = TriMesh(arr["vertices"].astype(np.float64), arr["triangles"].astype(np.int64),
                   arr["colors"].astype(np.float64) if "colors" in arr else None, arr["face_labels"])
    kw = dict(rest=rest, parents=arr["parents"], joints=arr["joints"], weights=arr["weights"],
              shapedirs=arr["shapedirs"], exprdirs=arr["exprdirs"], landmarks=arr["landmarks"],
              jaw_joint=header["jaw_joint"], lower_body=arr["lower_body"].astype(bool))
    if header.get("kind") == "template":
        return RiggedTemplate(**kw, correspondence=arr.get("correspondence"), registration=header.get("registration"))
    return SkinnedModel(**kw)


# --- procedural rigs -------------------------------------------------------------------


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def uv_sphere(n_lat, n_lon, radii=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)):
    """Closed UV sphere with single-vertex poles; +Y is the polar axis."""
    verts = [(0.0, 1.0, 0.0)]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_lon):
            th = 2 * np.pi * j / n_lon
            verts.append((np.sin(phi) * np.sin(th), np.cos(phi), np.sin(phi) * np.cos(th)))
    verts.append((0.0, -1.0, 0.0))
    verts = np.array(verts) * np.asarray(radii) + np.asarray(center)
    tris = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        tris.append((0, ring(1, j), ring(1, j + 1)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b, c, d = ring(i, j), ring(i, j + 1), ring(i + 1, j), ring(i + 1, j + 1)
            tris.append((a, c, b))
            tris.append((b, c, d))
    south = len(verts) - 1
    for j in range(n_lon):
        tris.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    return np.array(verts), np.array(tris)


def make_cylinder_rig(n_rings=12, n_around=12, height=1.0, radius=0.2, n_expr=2):
    """Two-joint vertical tube: joint 0 at the base, joint 1 at mid height."""
    ys = np.linspace(-height / 2, height / 2, n_rings)
    verts = []
    for y in ys:
        for j in range(n_around):
            a = 2 * np.pi * j / n_around
            verts.append((radius * np.cos(a), y, radius * np.sin(a)))
    verts = np.array(verts)
    tris = []
    for i in range(n_rings - 1):
        for j in range(n_around):
            a = i * n_around + j
            b = i * n_around + (j + 1) % n_around
            c = a + n_around
            d = b + n_around
            tris += [(a, c, b), (b, c, d)]
    w1 = _smoothstep(-0.1 * height, 0.1 * height, verts[:, 1])
    weights = np.stack([1 - w1, w1], axis=1)
    labels = np.where(verts[:, 1] > 0, FACE, NON_FACE)
    rng = np.random.default_rng(7)
    exprdirs = 0.02 * rng.normal(size=(len(verts), 3, n_expr))
    shapedirs = np.stack([verts * [1, 0, 1], verts * [0, 1, 0]], axis=2) * 0.1
    rest = TriMesh(verts, np.array(tris), labels=labels)
    return SkinnedModel(rest, [-1, 0], [(0, -height / 2, 0), (0, 0, 0)], weights, shapedirs, exprdirs,
                        landmarks=np.arange(0, len(verts), max(1, len(verts) // 8)), jaw_joint=-1)


HEAD_CENTER = np.array([0.0, 0.05, 0.0])
HEAD_RADII = np.array([0.42, 0.55, 0.46])


def head_landmark_dirs():
    """Unit directions (from the head center) of the facial landmarks."""
    pts = []
    for x in (-0.45, -0.2, 0.2, 0.45):  # brows
        pts.append((x, 0.35, 1.0))
    for x in (-0.3, 0.3):  # eyes
        pts.append((x, 0.2, 1.0))
    pts += [(0.0, 0.05, 1.0), (0.0, -0.05, 1.0)]  # nose
    for x in (-0.3, -0.12, 0.12, 0.3):  # upper lip / mouth corners
        pts.append((x, -0.15, 1.0))
    for x in (-0.2, 0.0, 0.2):  # lower lip
        pts.append((x, -0.3, 1.0))
    for x in (-0.5, -0.25, 0.0, 0.25, 0.5):  # jaw line and chin
        pts.append((x, -0.6, 0.9))
    d = np.array(pts, dtype=np.float64)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def make_head_rig(n_lat=28, n_lon=40, n_expr=10, n_shape=4):
    """Procedural head: ellipsoid with a hinged jaw region.

    Joints: 0 root (torso), 1 lower body (regularized), 2 neck, 3 jaw.
    The face looks along +Z with +Y up; a positive x-axis jaw rotation
    opens the mouth.
    """
    v, tris = uv_sphere(n_lat, n_lon, HEAD_RADII, HEAD_CENTER)
    y, z = v[:, 1], v[:, 2]
    lower = _smoothstep(-0.36, -0.46, y)
    jaw = _smoothstep(-0.06, -0.16, y) * _smoothstep(-0.05, 0.15, z) * (1 - lower)
    neck = (1 - lower - jaw) * _smoothstep(-0.42, -0.28, y)
    root = 1 - lower - jaw - neck
    weights = np.stack([root, lower, neck, jaw], axis=1)
    weights = np.clip(weights, 0, None)
    weights /= weights.sum(axis=1, keepdims=True)
    joints = np.array([[0.0, -0.45, 0.0], [0.0, -0.5, 0.0], [0.0, -0.3, 0.0], [0.0, -0.05, -0.1]])
    labels = np.where((z > 0.1) & (y > -0.5) & (y < 0.4), FACE, NON_FACE).astype(np.uint8)

    normals = (v - HEAD_CENTER) / HEAD_RADII**2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    rng = np.random.default_rng(11)
    exprdirs = np.zeros((len(v), 3, n_expr))
    dirs = head_landmark_dirs()
    for k in range(n_expr):
        c = HEAD_CENTER + HEAD_RADII * dirs[(3 * k + 1) % len(dirs)]
        g = np.exp(-np.sum((v - c) ** 2, axis=1) / (2 * 0.12**2))
        t0 = rng.normal(size=3)
        tang = t0 - normals * np.sum(normals * t0, axis=1, keepdims=True)
        disp = 0.6 * normals + tang
        exprdirs[:, :, k] = 0.03 * g[:, None] * disp
    shapedirs = np.zeros((len(v), 3, n_shape))
    rel = v - HEAD_CENTER
    basis = [rel * [1, 0, 0], rel * [0, 1, 0], rel * [0, 0, 1], normals * _smoothstep(0.0, 0.3, z)[:, None]]
    for b in range(n_shape):
        shapedirs[:, :, b] = 0.1 * basis[b % len(basis)]

    lm_pts = HEAD_CENTER + HEAD_RADII * dirs
    lm, _ = nearest_lowest(v, lm_pts)
    rest = TriMesh(v, tris, labels=labels)
    return SkinnedModel(rest, [-1, 0, 0, 2], joints, weights, shapedirs, exprdirs, lm, jaw_joint=3,
                        lower_body=[False, True, False, False])
