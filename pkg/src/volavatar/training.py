"""Joint optimization of the avatar fields, the balanced frame sampler and the weight mapping fit."""

from __future__ import annotations

import csv
import enum
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .body_model import PoseParams, RiggedTemplate, evaluate_template, load_rig, pose_from_dict, pose_to_dict, save_rig
from .dataio import Dataset, FrameCategory
from .deformation import BlendFieldBasis, CoarseField, MappingNet, blend_features
from .geometry import Camera, bounding_sphere
from .metrics import metric_l1, metric_psnr, metric_ssim
from .nets import Adam, exponential, load_checkpoint, save_checkpoint
from .nets import tape as T
from .renderer import (LOSS_NAMES, PHASE_A, PHASE_B, AppearanceField, RaySamples, composite, default_pyramid,
                       image_rays, loss_beta, loss_color, loss_downsample, loss_perceptual, sample_rays, total_loss)

CATEGORIES = (FrameCategory.STATIC360, FrameCategory.EXPRESSION_FRONTAL, FrameCategory.TALKING_FRONTAL)
FRONTAL = (FrameCategory.EXPRESSION_FRONTAL, FrameCategory.TALKING_FRONTAL)
N_COND_PSI = 10


class TrainingError(RuntimeError):
    pass


class EmptyCategoryError(ValueError):
    pass


class NoFrontalFramesError(ValueError):
    pass


class Mode(enum.Enum):
    FULL = "FULL"
    NO_DEFORMATION_FIELD = "NO_DEFORMATION_FIELD"
    APPEARANCE_BLENDING = "APPEARANCE_BLENDING"
    DIRECT_CONDITIONING = "DIRECT_CONDITIONING"
    IMBALANCED_SAMPLING = "IMBALANCED_SAMPLING"
    NO_PERCEPTUAL = "NO_PERCEPTUAL"
    NO_BETA = "NO_BETA"

    @property
    def displaces(self):
        return self not in (Mode.NO_DEFORMATION_FIELD, Mode.APPEARANCE_BLENDING, Mode.DIRECT_CONDITIONING)

    @property
    def has_blendfields(self):
        return self not in (Mode.NO_DEFORMATION_FIELD, Mode.DIRECT_CONDITIONING)


@dataclass
class TrainConfig:
    """Everything that determines a training run besides the dataset.

    Defaults are desk scale (64x64 images, minutes on one core);
    :meth:`paper_scale` gives the full-size architecture.
    """

    iterations: int = 3000
    phase_switch: float = 0.6
    lr_grid: float = 1e-2
    lr_net: float = 1e-3
    lr_w: float = 1e-2
    lr_final: float = 0.33
    rates: tuple = (61.0, 1.0, 2.0)
    mode: Mode = Mode.FULL
    seed: int = 0
    patch: int = 32
    n_samples: int = 128
    radius: float = 0.025
    n_blend: int = 11
    app_grid: dict = field(default_factory=lambda: dict(n_levels=12, table_size=2**14, n_features=2,
                                                        n_min=16, n_max=512))
    blend_grid: dict = field(default_factory=lambda: dict(n_levels=8, table_size=2**12, n_features=2,
                                                          n_min=8, n_max=128))
    deform_hidden: tuple = (32, 32)
    density_hidden: tuple = (64,)
    latent: int = 15
    color_hidden: tuple = (64, 64)
    dir_freqs: int = 4
    density_shift: float = -2.0
    cull_backfacing: float | None = 0.2
    mapping_hidden: tuple = (64, 64, 64)
    mapping_freqs: int = 4
    mapping_iters: int = 2000
    mapping_lr: float = 1e-3
    checkpoint_every: int = 0

    @classmethod
    def paper_scale(cls, **kw):
        base = dict(iterations=400_000,
                    app_grid=dict(n_levels=16, table_size=2**17, n_features=4, n_min=16, n_max=2048),
                    blend_grid=dict(n_levels=16, table_size=2**17, n_features=4, n_min=16, n_max=2048),
                    deform_hidden=(128, 128, 128), density_hidden=(64,), color_hidden=(64, 64),
                    mapping_hidden=(128, 128, 128), mapping_freqs=10)
        base.update(kw)
        return cls(**base)

    def validate(self):
        if not 0.0 < self.phase_switch < 1.0:
            raise ValueError("phase_switch must lie in (0, 1)")
        if len(self.rates) != 3 or min(self.rates) <= 0:
            raise ValueError("sampler needs three positive category rates")
        if self.iterations < 1 or self.patch < 1:
            raise ValueError("iterations and patch size must be positive")
        if not isinstance(self.mode, Mode):
            self.mode = Mode(self.mode)
        return self

    def to_dict(self):
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kw = dict(d)
        if "mode" in kw:
            kw["mode"] = Mode(kw["mode"])
        for k in ("rates", "deform_hidden", "density_hidden", "color_hidden", "mapping_hidden"):
            if k in kw:
                kw[k] = tuple(kw[k])
        return cls(**kw).validate()

    def lambdas(self, iteration):
        """Active loss weights (color, perceptual, downsample, beta) at ``iteration``."""
        if self.mode == Mode.NO_PERCEPTUAL:
            lam = PHASE_A
        else:
            lam = PHASE_A if iteration < self.switch_iteration else PHASE_B
        if self.mode == Mode.NO_BETA:
            lam = lam[:3] + (0.0,)
        return lam

    @property
    def switch_iteration(self):
        return int(round(self.phase_switch * self.iterations))


# --- sampler ---------------------------------------------------------------------------


class FrameSampler:
    """Category-balanced frame draws.

    A category is chosen with probability proportional to its frame count
    times its rate, then a frame uniformly within it; ``uniform`` ignores
    categories altogether.
    """

    def __init__(self, categories, rates=(61.0, 1.0, 2.0), uniform=False):
        self.categories = [FrameCategory(c) for c in categories]
        if not self.categories:
            raise EmptyCategoryError("no frames to sample from")
        self.uniform = bool(uniform)
        self.members = [np.flatnonzero([c == cat for c in self.categories]) for cat in CATEGORIES]
        mass = np.array([len(m) * r for m, r in zip(self.members, rates)], dtype=np.float64)
        self.probs = mass / mass.sum()
        self.cdf = np.cumsum(self.probs)

    def __len__(self):
        return len(self.categories)

    def frame_probabilities(self):
        if self.uniform:
            return np.full(len(self), 1.0 / len(self))
        p = np.zeros(len(self))
        for m, pc in zip(self.members, self.probs):
            if len(m):
                p[m] = pc / len(m)
        return p

    def draw(self, rng, n):
        """``n`` frame positions (vectorized; same rule as :func:`sample_frame`)."""
        if self.uniform:
            return rng.integers(0, len(self), size=n)
        u = rng.random(n)
        cat = np.minimum(np.searchsorted(self.cdf, u, side="right"), len(CATEGORIES) - 1)
        out = np.empty(n, dtype=np.int64)
        for c, m in enumerate(self.members):
            sel = cat == c
            k = int(sel.sum())
            if k:
                if not len(m):
                    raise EmptyCategoryError(f"category {CATEGORIES[c].value} has no frames")
                out[sel] = m[rng.integers(0, len(m), size=k)]
        return out


def sample_frame(sampler: FrameSampler, rng) -> int:
    return int(sampler.draw(rng, 1)[0])


# --- model -----------------------------------------------------------------------------


def _scatter(n, idx, v, width):
    """``(n, width)`` Var that is ``v`` at rows ``idx`` and zero elsewhere."""
    vv = T.value(v)
    out = np.zeros((n, width), dtype=vv.dtype)
    out[idx] = vv

    def bw(g):
        return (g[idx],)

    return T.custom(out, (v,), bw)


class Avatar:
    """Template rig plus the learned fields, per-frame weights and optional mapping net."""

    def __init__(self, rig: RiggedTemplate, config: TrainConfig, frame_ids):
        self.rig = rig
        self.config = config.validate()
        self.frame_ids = [int(i) for i in frame_ids]
        self.row_of = {f: r for r, f in enumerate(self.frame_ids)}
        self.canonical = evaluate_template(rig, PoseParams.zeros(rig))
        lo = self.canonical.vertices.min(axis=0) - 0.15
        hi = self.canonical.vertices.max(axis=0) + 0.15
        bbox = (tuple(lo), tuple(hi))
        cfg = self.config
        mode = cfg.mode
        extra = 0
        if mode == Mode.APPEARANCE_BLENDING:
            extra = cfg.blend_grid["n_levels"] * cfg.blend_grid["n_features"]
        elif mode == Mode.DIRECT_CONDITIONING:
            extra = 3 + N_COND_PSI
        self.app = AppearanceField(dict(cfg.app_grid, bbox=bbox), cfg.density_hidden, cfg.latent, cfg.color_hidden,
                                   cfg.dir_freqs, extra_dim=extra, seed=cfg.seed, density_shift=cfg.density_shift)
        self.basis = (BlendFieldBasis(cfg.n_blend, dict(cfg.blend_grid, bbox=bbox), cfg.deform_hidden, seed=cfg.seed)
                      if mode.has_blendfields else None)
        self.w = np.zeros((len(self.frame_ids), cfg.n_blend), dtype=np.float32)
        self.mapping: MappingNet | None = None

    # parameter groups
    def grid_params(self):
        out = {"appearance.grid": self.app.grid.table}
        if self.basis is not None:
            out.update(self.basis.grid_params())
        return out

    def net_params(self):
        out = dict(self.app.density.params)
        out.update(self.app.color.params)
        if self.basis is not None:
            out.update(self.basis.mlp.params)
        return out

    def params(self):
        out = self.grid_params()
        out.update(self.net_params())
        out["w"] = self.w
        if self.mapping is not None:
            out.update(self.mapping.params)
        return out

    def stored_w(self, frame):
        r = self.row_of.get(int(frame))
        return None if r is None else self.w[r]

    def mapped_w(self, params: PoseParams):
        if self.mapping is None:
            raise TrainingError("no mapping network has been trained")
        return np.asarray(self.mapping(params.theta_jaw, params.psi), dtype=np.float32)

    # geometry
    def coarse_field(self, params: PoseParams):
        return CoarseField(self.canonical, evaluate_template(self.rig, params))

    def samples(self, cam: Camera, params: PoseParams, field_=None):
        """Near-surface samples for every pixel of ``cam`` (row-major)."""
        field_ = field_ or self.coarse_field(params)
        c, r = bounding_sphere(field_.deformed)
        rays = image_rays(cam, (c, r + self.config.radius))
        s = sample_rays(rays, field_, self.config.n_samples, self.config.radius)
        if self.config.cull_backfacing is not None and len(s.t):
            # samples whose nearest triangle faces away sit behind the visible surface
            n = np.cross(*(field_.deformed.corners()[:, 1:] - field_.deformed.corners()[:, :1]).transpose(1, 0, 2))
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-30)
            s = s.filter(np.einsum("sc,sc->s", n[s.tri], s.dirs) <= self.config.cull_backfacing)
        return s

    # appearance
    def radiance(self, s: RaySamples, w=None, params: PoseParams | None = None, tape=None):
        """Density and color at the samples, with the mode's deformation or conditioning.

        ``w`` is a length-K weight vector (array or Var); ``None`` or an
        all-zero array evaluates only the base field ``d_0``.
        """
        mode = self.config.mode
        dt = self.app.dtype
        n = len(s.t)
        x_in = s.x.astype(dt)
        extra = None
        face = np.flatnonzero(s.gate > 0)
        zero_w = w is None or (not isinstance(w, T.Var) and not np.any(w))
        if mode.displaces and len(face):
            xf = s.x[face]
            gate = s.gate[face].astype(dt)[:, None]
            if zero_w:
                d = self.basis.mlp(self.basis.grids[0](xf, tape), tape)
            else:
                from .deformation import blend_displacement
                d = blend_displacement(self.basis, xf, w, tape)
            x_in = T.add(x_in, _scatter(n, face, T.mul(gate, d), 3))
        elif mode == Mode.APPEARANCE_BLENDING:
            width = self.app.extra_dim
            if len(face):
                xf = s.x[face]
                gate = s.gate[face].astype(dt)[:, None]
                if zero_w:
                    f = self.basis.grids[0](xf, tape)
                else:
                    f = blend_features(self.basis, xf, w, tape)
                extra = _scatter(n, face, T.mul(gate, f), width)
            else:
                extra = np.zeros((n, width), dtype=dt)
        elif mode == Mode.DIRECT_CONDITIONING:
            if params is None:
                raise ValueError("direct conditioning needs the frame parameters")
            cond = np.concatenate([params.theta_jaw, np.asarray(params.psi)[:N_COND_PSI]]).astype(dt)
            if len(cond) < 3 + N_COND_PSI:
                cond = np.pad(cond, (0, 3 + N_COND_PSI - len(cond)))
            extra = np.broadcast_to(cond, (n, len(cond))).copy()
        return self.app(x_in, s.dirs, extra=extra, tape=tape, need_x_grad=isinstance(x_in, T.Var))

    def render_samples(self, s: RaySamples, w=None, params=None, tape=None):
        sigma, c = self.radiance(s, w, params, tape)
        return composite(sigma, c, s.delta, s.offsets)

    def render(self, cam: Camera, params: PoseParams, w=None, chunk=2048, samples=None):
        """Full image ``(H, W, 3)`` and opacity ``(H, W)``."""
        s = samples if samples is not None else self.samples(cam, params)
        R = s.n_rays
        img = np.empty((R, 3))
        gam = np.empty(R)
        for a in range(0, R, chunk):
            sub = s.select(np.arange(a, min(a + chunk, R)))
            C, g = self.render_samples(sub, w, params)
            img[a:a + len(sub.offsets) - 1] = T.value(C)
            gam[a:a + len(sub.offsets) - 1] = T.value(g)
        return img.reshape(cam.height, cam.width, 3), gam.reshape(cam.height, cam.width)


# --- training state ---------------------------------------------------------------------


@dataclass
class FrameData:
    index: int
    row: int  # row in the w table; -1 when w stays frozen at zero
    category: FrameCategory
    camera: Camera
    params: PoseParams
    image: np.ndarray
    mask: np.ndarray | None
    samples: RaySamples


def training_frames(ds: Dataset):
    out = [f for f in ds.split("train") if f.params is not None]
    if not out:
        raise TrainingError("dataset has no tracked training frames")
    return out


def use_ground_truth(ds: Dataset):
    """Attach the generator's true parameters (sidecar file) as the frame tracks."""
    from .tracking import load_tracks
    rel = ds.extra.get("ground_truth")
    if rel is None:
        raise TrainingError("dataset carries no ground-truth sidecar")
    ds.attach_tracks(load_tracks(ds.path(rel)))
    return ds


def load_template(ds: Dataset):
    if ds.rig is None:
        raise TrainingError("dataset names no rig")
    return load_rig(ds.rig_path())


def build_frame(avatar: Avatar, ds: Dataset, fr) -> FrameData:
    row = avatar.row_of.get(fr.index, -1)
    if fr.category == FrameCategory.STATIC360:
        row = -1
    s = avatar.samples(fr.camera, fr.params)
    return FrameData(fr.index, row, fr.category, fr.camera, fr.params, ds.image(fr).astype(np.float32),
                     ds.mask(fr), s)


class Trainer:
    """Optimizer, sampler, RNG and per-frame sample cache for one run."""

    def __init__(self, ds: Dataset, config: TrainConfig, rig=None, avatar: Avatar | None = None):
        self.ds = ds
        self.config = config.validate()
        frames = training_frames(ds)
        self.avatar = avatar or Avatar(rig or load_template(ds), self.config, [f.index for f in frames])
        self.frames = [build_frame(self.avatar, ds, f) for f in frames]
        for fd in self.frames:
            if fd.camera.width < self.config.patch or fd.camera.height < self.config.patch:
                raise TrainingError(f"frame {fd.index} is smaller than the {self.config.patch}px patch")
        self.sampler = FrameSampler([f.category for f in self.frames], self.config.rates,
                                    uniform=self.config.mode == Mode.IMBALANCED_SAMPLING)
        self.rng = np.random.default_rng(self.config.seed)
        cfg = self.config
        groups = {"grids": (self.avatar.grid_params(), cfg.lr_grid), "nets": (self.avatar.net_params(), cfg.lr_net)}
        if cfg.mode.has_blendfields:
            groups["w"] = ({"w": self.avatar.w}, cfg.lr_w)
        self.adam = Adam(groups, schedule=exponential(cfg.iterations, cfg.lr_final))
        self.iteration = 0
        self.trace = []
        self.pyramid = default_pyramid()

    def patch_losses(self, fd: FrameData, origin, lambdas, tape):
        """Weighted loss terms and total for one patch (recorded on ``tape``)."""
        p = self.config.patch
        x0, y0 = int(origin[0]), int(origin[1])
        W = fd.camera.width
        ys, xs = np.mgrid[y0:y0 + p, x0:x0 + p]
        s = fd.samples.select((ys * W + xs).ravel())
        w = None
        if fd.row >= 0 and self.config.mode.has_blendfields:
            w = T.getitem(tape.param(self.avatar.w), fd.row)
        C, gamma = self.avatar.render_samples(s, w, fd.params, tape)
        gt = fd.image[y0:y0 + p, x0:x0 + p].reshape(-1, 3)
        raw = {"color": loss_color(C, gt), "perceptual": loss_perceptual(C, gt, self.pyramid),
               "downsample": loss_downsample(C, gt), "beta": loss_beta(gamma)}
        weighted = {k: T.mul(lam, raw[k]) for k, lam in zip(LOSS_NAMES, lambdas)}
        total = total_loss(raw, lambdas)
        return weighted, total

    def step(self):
        """One iteration: draw a frame and a patch, backpropagate, update."""
        it = self.iteration
        pos = sample_frame(self.sampler, self.rng)
        fd = self.frames[pos]
        p = self.config.patch
        origin = (int(self.rng.integers(0, fd.camera.width - p + 1)), int(self.rng.integers(0, fd.camera.height - p + 1)))
        lambdas = self.config.lambdas(it)
        tape = T.Tape()
        weighted, total = self.patch_losses(fd, origin, lambdas, tape)
        tv = float(T.value(total))
        if not np.isfinite(tv):
            raise TrainingError(f"non-finite loss at iteration {it}")
        tape.backward(total)
        params = self.avatar.params()
        grads = {k: tape.grad_of(a) for k, a in params.items() if k != "w"}
        grads["w"] = tape.grad_of(self.avatar.w)
        rows = {"w": np.array([fd.row] if fd.row >= 0 else [], dtype=np.int64)}
        self.adam.step(grads, rows=rows)
        rec = {"iteration": it, "phase": "A" if it < self.config.switch_iteration else "B", "frame": fd.index}
        for k in LOSS_NAMES:
            rec[k] = float(T.value(weighted[k]))
        rec["total"] = tv
        self.trace.append(rec)
        self.iteration += 1
        return rec

    def run(self, iterations=None, out_dir=None, log=None):
        end = self.config.iterations if iterations is None else min(self.iteration + iterations,
                                                                      self.config.iterations)
        every = self.config.checkpoint_every
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        while self.iteration < end:
            rec = self.step()
            if log is not None and (rec["iteration"] % 500 == 0 or self.iteration == end):
                log(f"it {rec['iteration']:6d} phase {rec['phase']} total {rec['total']:.5f}")
            if out_dir and every and self.iteration % every == 0:
                self.save(os.path.join(out_dir, "checkpoint.ckpt"))
        if out_dir:
            self.save(os.path.join(out_dir, "checkpoint.ckpt"))
            write_loss_csv(os.path.join(out_dir, "losses.csv"), self.trace)
        return self.trace

    # checkpoints
    def save(self, path):
        save_avatar(path, self.avatar, adam=self.adam, rng=self.rng, iteration=self.iteration,
                    dataset=self.ds.root, trace_len=len(self.trace))

    @classmethod
    def resume(cls, ds: Dataset, path, trace=None):
        avatar, blobs, meta = load_avatar(path)
        tr = cls(ds, avatar.config, avatar=avatar)
        tr.adam.load_state(blobs)
        tr.rng.bit_generator.state = meta["rng"]
        tr.iteration = int(meta["iteration"])
        tr.trace = list(trace or [])
        return tr


def train(ds: Dataset, config: TrainConfig, out_dir=None, log=None, resume=None) -> Trainer:
    """Run (or continue) a training job; returns the trainer holding the avatar and loss trace."""
    if resume:
        prev = read_loss_csv(os.path.join(out_dir, "losses.csv")) if out_dir and os.path.exists(
            os.path.join(out_dir, "losses.csv")) else None
        tr = Trainer.resume(ds, resume, prev)
    else:
        tr = Trainer(ds, config)
    tr.run(out_dir=out_dir, log=log)
    return tr


def train_step(trainer: Trainer):
    return trainer.step()


# --- loss trace ---------------------------------------------------------------------------

CSV_FIELDS = ("iteration", "phase", "frame", *LOSS_NAMES, "total")


def write_loss_csv(path, trace):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        wr.writeheader()
        for rec in trace:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})


def read_loss_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {"iteration": int(row["iteration"]), "phase": row["phase"], "frame": int(row["frame"])}
            for k in (*LOSS_NAMES, "total"):
                rec[k] = float(row[k])
            out.append(rec)
    return out


# --- avatar checkpoints ---------------------------------------------------------------------


def _rig_bytes(rig):
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "t.rig")
        save_rig(rig, p)
        with open(p, "rb") as fh:
            return np.frombuffer(fh.read(), dtype=np.uint8).copy()


def _rig_from_bytes(b):
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "t.rig")
        with open(p, "wb") as fh:
            fh.write(np.asarray(b, dtype=np.uint8).tobytes())
        return load_rig(p)


def save_avatar(path, avatar: Avatar, adam=None, rng=None, iteration=0, **meta_kw):
    blobs = dict(avatar.params())
    blobs["rig.bytes"] = _rig_bytes(avatar.rig)
    if adam is not None:
        blobs.update(adam.state())
    meta = {"config": avatar.config.to_dict(), "frame_ids": avatar.frame_ids, "iteration": int(iteration),
            "mapping": None if avatar.mapping is None else {
                "hidden": list(avatar.config.mapping_hidden), "n_freqs": avatar.mapping.n_freqs,
                "n_psi": avatar.mapping.n_psi}}
    if rng is not None:
        meta["rng"] = rng.bit_generator.state
    meta.update(meta_kw)
    save_checkpoint(path, blobs, seed=avatar.config.seed, meta=meta)


def load_avatar(path):
    """Returns ``(avatar, blobs, meta)``."""
    blobs, _, meta = load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    avatar = Avatar(_rig_from_bytes(blobs["rig.bytes"]), config, meta["frame_ids"])
    if meta.get("mapping"):
        m = meta["mapping"]
        avatar.mapping = MappingNet(config.n_blend, m["n_psi"], m["n_freqs"], tuple(m["hidden"]), seed=config.seed)
    for k, a in avatar.params().items():
        if k not in blobs:
            raise TrainingError(f"checkpoint lacks parameter {k}")
        a[...] = blobs[k]
    return avatar, blobs, meta


# --- mapping network --------------------------------------------------------------------------


def mapping_pairs(avatar: Avatar, ds: Dataset, exclude=()):
    """``(theta_jaw, psi, w)`` regression set from frontal training frames."""
    excl = {int(e) for e in exclude}
    jaws, psis, ws = [], [], []
    for fr in training_frames(ds):
        if fr.category not in FRONTAL or fr.index in excl or fr.index not in avatar.row_of:
            continue
        jaws.append(fr.params.theta_jaw)
        psis.append(fr.params.psi)
        ws.append(avatar.w[avatar.row_of[fr.index]])
    if not ws:
        raise NoFrontalFramesError("no frontal frames with stored weights to fit the mapping network")
    return np.array(jaws), np.array(psis), np.array(ws, dtype=np.float32)


def fit_mapping(jaws, psis, ws, config: TrainConfig, n_psi=N_COND_PSI):
    """Full-batch L2 regression from ``(theta_jaw, psi)`` to ``w``."""
    psis = np.asarray(psis)
    if psis.shape[1] < n_psi:
        psis = np.pad(psis, ((0, 0), (0, n_psi - psis.shape[1])))
    net = MappingNet(config.n_blend, n_psi, config.mapping_freqs, config.mapping_hidden, seed=config.seed)
    enc, _ = net.encode(jaws, psis)
    target = np.asarray(ws, dtype=np.float32)
    adam = Adam({"mapping": (net.params, config.mapping_lr)})
    for _ in range(config.mapping_iters):
        tape = T.Tape()
        pred = net.mlp(enc, tape)
        loss = T.mean(T.square(T.sub(pred, target)))
        tape.backward(loss)
        adam.step(net.mlp.grads(tape))
    return net


def mapping_mse(net: MappingNet, jaws, psis, ws):
    pred = net(np.asarray(jaws), np.asarray(psis))
    return float(np.mean((np.asarray(pred).reshape(np.shape(ws)) - ws) ** 2))


def train_mapping(avatar: Avatar, ds: Dataset, exclude=()) -> MappingNet:
    """Fit and attach the mapping network; static frames never enter the regression set."""
    jaws, psis, ws = mapping_pairs(avatar, ds, exclude)
    avatar.mapping = fit_mapping(jaws, psis, ws, avatar.config)
    return avatar.mapping


# --- evaluation --------------------------------------------------------------------------------


def frame_weights(avatar: Avatar, fr, source="auto"):
    """Blend weights for rendering a dataset frame.

    ``stored`` uses the trained per-frame row, ``mapped`` the mapping
    network, ``zero`` none; ``auto`` prefers stored, then mapped.
    """
    if source == "zero" or not avatar.config.mode.has_blendfields:
        return None
    if source in ("stored", "auto"):
        w = avatar.stored_w(fr.index)
        if w is not None or source == "stored":
            return w
    if source in ("mapped", "auto") and avatar.mapping is not None:
        if fr.category == FrameCategory.STATIC360:
            return None
        return avatar.mapped_w(fr.params)
    return None


def render_frame(avatar: Avatar, fr, source="auto"):
    return avatar.render(fr.camera, fr.params, frame_weights(avatar, fr, source))


def evaluate_frames(avatar: Avatar, ds: Dataset, frames, source="auto"):
    """Per-frame metrics (L1, PSNR, SSIM), masked to the foreground when a mask exists."""
    rows = []
    for fr in frames:
        img, gamma = render_frame(avatar, fr, source)
        ref = ds.image(fr)
        mask = ds.mask(fr)
        rows.append({"frame": fr.index, "split": fr.split, "category": fr.category.value,
                     "l1": metric_l1(img, ref, mask), "psnr": metric_psnr(img, ref, mask),
                     "ssim": metric_ssim(img, ref, mask), "psnr_full": metric_psnr(img, ref),
                     "gamma_fg": float(gamma[mask > 0.5].mean()) if mask is not None and (mask > 0.5).any() else
                     float("nan"),
                     "gamma_bg": float(gamma[mask <= 0.5].mean()) if mask is not None and (mask <= 0.5).any() else
                     float("nan")})
    return rows


def save_params_json(path, params: PoseParams):
    with open(path, "w") as fh:
        json.dump(pose_to_dict(params), fh)


def load_params_json(path):
    with open(path) as fh:
        return pose_from_dict(json.load(fh))
