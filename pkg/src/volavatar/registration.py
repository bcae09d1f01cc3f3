"""Three-step alignment of the skinned model to a static scan."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import bvh as bvh_mod
from .body_model import PoseParams, Similarity, SkinnedModel, skin, transfer_rig
from .geometry import TriMesh, chamfer_distance, rotation_matrix
from .nets import Adam, halving
from .nets import tape as T


class DegenerateLandmarksError(ValueError):
    pass


class RegistrationError(RuntimeError):
    pass


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class RegistrationConfig:
    lambda_key: float = 10.0
    lambda_chamfer: float = 0.01
    lambda_reg: float = 1000.0  # float("inf") pins the lower-body joints at zero
    refine_iters: int = 500
    full_iters: int = 1000
    lr: float = 1e-2
    lr_halving: int = 250
    polish_iters: int = 40  # Levenberg-Marquardt steps after Adam; 0 disables

    def __post_init__(self):
        if min(self.lambda_key, self.lambda_chamfer, self.lambda_reg) < 0:
            raise ValueError("registration weights must be non-negative")


@dataclass
class RegistrationResult:
    params: PoseParams
    similarity: Similarity
    energies: dict
    history: list = field(default_factory=list)


def fit_similarity(src, dst) -> Similarity:
    """Closed-form least-squares ``s R x + t ~ y`` (Umeyama)."""
    x = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(x) != len(y):
        raise ValueError("landmark sets differ in size")
    if len(x) < 3:
        raise DegenerateLandmarksError("need at least 3 landmark pairs")
    mx, my = x.mean(0), y.mean(0)
    xc, yc = x - mx, y - my
    sv = np.linalg.svd(xc, compute_uv=False)
    if sv[0] == 0 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateLandmarksError("landmarks are collinear")
    cov = yc.T @ xc / len(x)
    U, S, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    var_x = np.sum(xc**2) / len(x)
    s = float(np.trace(np.diag(S) @ D) / var_x)
    t = my - s * R @ mx
    return Similarity(s, R, t)


def _rows(moved, trans, u, scale):
    """Jacobian rows of ``u . moved`` w.r.t. (log-scale, rotation, translation)."""
    rel = moved - trans
    return np.hstack([np.sum(u * rel, axis=1, keepdims=True), np.cross(rel, u), u]) * scale


def _unit(d, fallback):
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return np.where(n > 1e-15, d / np.maximum(n, 1e-300), fallback), n[:, 0]


class _PointObjective:
    """Nearest-vertex Chamfer between point sets."""

    def __init__(self, x, b):
        self.x, self.b, self.tree_b = x, b, cKDTree(b)

    def __call__(self, sim: Similarity, jac=False):
        a = sim.apply(self.x)
        da, ia = self.tree_b.query(a)
        db, ib = cKDTree(a).query(self.b)
        val = np.mean(da**2) + np.mean(db**2)
        if not jac:
            return val
        d = np.vstack([a - self.b[ia], a[ib] - self.b])
        moved = np.vstack([a, a[ib]])
        w = np.concatenate([np.full(len(a), 1 / np.sqrt(len(a))), np.full(len(self.b), 1 / np.sqrt(len(self.b)))])
        u, r = _unit(d, np.array([1.0, 0.0, 0.0]))
        return val, r * w, _rows(moved, sim.translation, u, w[:, None])


class _SurfaceObjective:
    """Chamfer with point-to-surface distances in both directions.

    Scan vertices are pulled back into the rest frame so the model BVH is
    built once.
    """

    def __init__(self, model: TriMesh, scan: TriMesh):
        self.x, self.b = model.vertices, scan.vertices
        self.mb, self.sb = bvh_mod.build(model), bvh_mod.build(scan)
        self.mn, self.sn = model.face_normals(), scan.face_normals()

    def __call__(self, sim: Similarity, jac=False):
        a = sim.apply(self.x)
        h1 = bvh_mod.nearest_triangles(self.sb, a)
        h2 = bvh_mod.nearest_triangles(self.mb, (self.b - sim.translation) @ sim.rotation / sim.scale)
        c = sim.apply(h2.closest)
        d1, d2 = a - h1.closest, c - self.b
        val = np.mean(np.sum(d1**2, axis=1)) + np.mean(np.sum(d2**2, axis=1))
        if not jac:
            return val
        u1, r1 = _unit(d1, self.sn[h1.triangle])
        u2, r2 = _unit(d2, self.mn[h2.triangle] @ sim.rotation.T)
        w1, w2 = 1 / np.sqrt(len(a)), 1 / np.sqrt(len(self.b))
        J = np.vstack([_rows(a, sim.translation, u1, w1), _rows(c, sim.translation, u2, w2)])
        return val, np.concatenate([r1 * w1, r2 * w2]), J


def _apply_step(sim: Similarity, delta):
    return Similarity(sim.scale * np.exp(delta[0]), rotation_matrix(delta[1:4]) @ sim.rotation,
                      sim.translation + delta[4:])


def refine_chamfer(model_points, scan_points, init: Similarity, max_iters=500, tol=1e-12) -> Similarity:
    """Levenberg-Marquardt on Chamfer over (log-scale, rotation, translation) from ``init``.

    With two meshes the distances are point-to-surface, which avoids the
    local minima a coarse vertex lattice creates; with point sets they are
    nearest-vertex. A trial step that raises the objective is rejected and
    the damping grows, so accepted iterates never increase it.
    """
    if isinstance(model_points, TriMesh) and isinstance(scan_points, TriMesh):
        objective = _SurfaceObjective(model_points, scan_points)
    else:
        x = np.asarray(getattr(model_points, "vertices", model_points), dtype=np.float64)
        objective = _PointObjective(x, np.asarray(getattr(scan_points, "vertices", scan_points), dtype=np.float64))
    sim = Similarity(init.scale, init.rotation.copy(), init.translation.copy())
    val, r, J = objective(sim, jac=True)
    mu = 1e-3
    converged = False
    for _ in range(max_iters):
        H, g = J.T @ J, J.T @ r
        if val == 0 or np.linalg.norm(g) < 1e-15:
            converged = True
            break
        accepted = False
        while mu < 1e12:
            delta = -np.linalg.solve(H + mu * np.diag(np.diag(H) + 1e-12), g)
            trial = _apply_step(sim, delta)
            v_new = objective(trial)
            if v_new <= val:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            converged = True
            break
        improvement = val - v_new
        sim = trial
        val, r, J = objective(sim, jac=True)
        mu = max(mu / 10.0, 1e-9)
        if improvement <= tol * max(val, 1e-30):
            converged = True
            break
    if not converged:
        warnings.warn(f"Chamfer refinement stopped after {max_iters} iterations", ConvergenceWarning, stacklevel=2)
    return sim


def _chamfer_var(a_var, b, tree_b):
    """Differentiable Chamfer between a Var point set and fixed points."""
    a = T.value(a_var)
    _, ia = tree_b.query(a)
    _, ib = cKDTree(a).query(b)
    d1 = T.sub(a_var, b[ia])
    d2 = T.sub(T.take(a_var, ib, axis=0), b)
    return T.add(T.mean(T.sum_(T.square(d1), axis=1)), T.mean(T.sum_(T.square(d2), axis=1)))


def registration_energy(model: SkinnedModel, sim: Similarity, params_vars, scan_points, scan_landmarks, config,
                        tree_b=None):
    """Weighted energy and its per-term values for the full-fit stage."""
    theta_body, theta_jaw, beta, psi = params_vars[:4]
    verts = skin(model, theta_body, theta_jaw, beta, psi)
    verts = T.add(T.mul(sim.scale, T.matmul(verts, sim.rotation.T)), sim.translation)
    if len(params_vars) > 4:
        # global correction about the current similarity: exp(ls) Rg (y - c) + c + dt
        log_s, omega, dt = params_vars[4:]
        c = sim.translation
        Rg = T.reshape(T.rodrigues(T.reshape(omega, (1, 3))), (3, 3))
        verts = T.add(T.mul(T.exp(log_s), T.matmul(T.sub(verts, c), T.transpose(Rg))), T.add(dt, c))
    lm = T.take(verts, model.landmarks, axis=0)
    e_key = T.mean(T.sum_(T.square(T.sub(lm, scan_landmarks)), axis=1))
    e_ch = _chamfer_var(verts, scan_points, tree_b or cKDTree(scan_points))
    lower = np.flatnonzero(model.lower_body[model.body_joint_ids])
    if len(lower) and np.isfinite(config.lambda_reg):
        e_reg = T.sum_(T.square(T.take(theta_body, lower, axis=0)))
        reg_w = config.lambda_reg
    else:
        e_reg, reg_w = T.Var(np.array(0.0)), 0.0
    total = T.add(T.add(T.mul(config.lambda_key, e_key), T.mul(config.lambda_chamfer, e_ch)), T.mul(reg_w, e_reg))
    parts = {"key": float(T.value(e_key)), "chamfer": float(T.value(e_ch)), "reg": float(T.value(e_reg))}
    return total, parts


def fit_full(model: SkinnedModel, scan, scan_landmarks, config: RegistrationConfig | None = None,
             similarity: Similarity | None = None, init: PoseParams | None = None) -> RegistrationResult:
    """Adam over (theta, beta, psi) plus a global similarity correction; keeps the best iterate."""
    cfg = config or RegistrationConfig()
    sim = similarity or Similarity()
    b = np.asarray(getattr(scan, "vertices", scan), dtype=np.float64)
    lms = np.asarray(scan_landmarks, dtype=np.float64).reshape(-1, 3)
    if len(lms) != len(model.landmarks):
        raise ValueError(f"{len(lms)} scan landmarks for {len(model.landmarks)} model landmarks")
    p0 = init.copy() if init is not None else PoseParams.zeros(model)
    params = {"theta_body": p0.theta_body, "theta_jaw": p0.theta_jaw, "beta": p0.beta, "psi": p0.psi,
              "log_scale": np.zeros(1), "omega": np.zeros(3), "shift": np.zeros(3)}
    keys = ("theta_body", "theta_jaw", "beta", "psi", "log_scale", "omega", "shift")
    pinned = np.flatnonzero(model.lower_body[model.body_joint_ids]) if np.isinf(cfg.lambda_reg) else []
    if len(pinned):
        params["theta_body"][pinned] = 0.0
    opt = Adam({"pose": (params, cfg.lr)}, schedule=halving(cfg.lr_halving))
    tree_b = cKDTree(b)
    best, best_e, history, first = None, np.inf, [], None
    for it in range(cfg.full_iters + 1):
        tape = T.Tape()
        vars_ = tuple(tape.param(params[k]) for k in keys)
        total, parts = registration_energy(model, sim, vars_, b, lms, cfg, tree_b)
        e = float(T.value(total))
        if not np.isfinite(e):
            raise RegistrationError(f"non-finite registration energy at iteration {it}: {parts}")
        history.append(e)
        if first is None:
            first = parts
        if e < best_e:
            best_e = e
            best = (PoseParams(params["theta_body"], params["theta_jaw"], params["beta"], params["psi"]), parts,
                    _compose(sim, params))
        if it == cfg.full_iters:
            break
        tape.backward(total)
        grads = {k: tape.grad_of(params[k]) for k in params}
        if len(pinned):
            grads["theta_body"] = grads["theta_body"].copy()
            grads["theta_body"][pinned] = 0.0
        opt.step(grads)
        if len(pinned):
            params["theta_body"][pinned] = 0.0
    best_params, parts, best_sim = best
    if cfg.polish_iters > 0:
        best_params, best_sim, best_e, parts, tail = polish_fit(model, best_sim, best_params, b, lms, cfg, tree_b)
        history += tail
    energies = dict(parts, total=best_e, initial_total=history[0])
    return RegistrationResult(best_params.copy(), best_sim, energies, history)


def _fit_residuals(model, sim, q, unpack, b, lms, cfg, tree_b, jac_h=0.0):
    """Residual vector whose squared norm is the full-fit energy (and optionally its Jacobian).

    Chamfer correspondences are frozen for the step.
    """
    def posed(qv):
        tb, tj, beta, psi, step = unpack(qv)
        return _apply_step(sim, step).apply(T.value(skin(model, tb, tj, beta, psi)))

    v = posed(q)
    K, Na, Nb = len(model.landmarks), len(v), len(b)
    _, ia = tree_b.query(v)
    _, ib = cKDTree(v).query(b)
    lower = np.flatnonzero(model.lower_body[model.body_joint_ids])
    use_reg = len(lower) and np.isfinite(cfg.lambda_reg)

    def resid(vv, qv):
        parts = [np.sqrt(cfg.lambda_key / K) * (vv[model.landmarks] - lms).ravel(),
                 np.sqrt(cfg.lambda_chamfer / Na) * (vv - b[ia]).ravel(),
                 np.sqrt(cfg.lambda_chamfer / Nb) * (vv[ib] - b).ravel()]
        if use_reg:
            parts.append(np.sqrt(cfg.lambda_reg) * unpack(qv)[0][lower].ravel())
        return np.concatenate(parts)

    r = resid(v, q)
    if not jac_h:
        return r
    J = np.empty((len(r), len(q)))
    for k in range(len(q)):
        qk = q.copy()
        qk[k] += jac_h
        J[:, k] = (resid(posed(qk), qk) - r) / jac_h
    return r, J


def polish_fit(model: SkinnedModel, sim: Similarity, params: PoseParams, b, lms, cfg: RegistrationConfig, tree_b=None):
    """Levenberg-Marquardt on the full-fit energy with frozen correspondences per step.

    Correspondences are refreshed after every step and a step is kept only
    if the energy with fresh correspondences does not rise. Returns
    ``(params, similarity, energy, parts, energy_history)``.
    """
    tree_b = tree_b or cKDTree(b)
    nb = params.theta_body.size
    free = np.ones(nb, dtype=bool)
    lower = np.flatnonzero(model.lower_body[model.body_joint_ids])
    if np.isinf(cfg.lambda_reg) and len(lower):
        free.reshape(-1, 3)[lower] = False
    base_body = params.theta_body.copy()
    sizes = [int(free.sum()), 3, len(params.beta), len(params.psi), 7]
    cuts = np.cumsum(sizes)[:-1]

    def unpack(q):
        body, jaw, beta, psi, step = np.split(q, cuts)
        tb = base_body.ravel().copy()
        tb[free] = body
        return tb.reshape(-1, 3), jaw, beta, psi, step

    def energy(q):
        r = _fit_residuals(model, sim, q, unpack, b, lms, cfg, tree_b)
        return float(r @ r)

    q = np.concatenate([params.theta_body.ravel()[free], params.theta_jaw, params.beta, params.psi, np.zeros(7)])
    e = energy(q)
    history, mu = [], 1e-3
    for _ in range(cfg.polish_iters):
        r, J = _fit_residuals(model, sim, q, unpack, b, lms, cfg, tree_b, jac_h=1e-7)
        H, g = J.T @ J, J.T @ r
        accepted = False
        while mu < 1e10:
            trial = q - np.linalg.solve(H + mu * np.diag(np.diag(H) + 1e-12), g)
            e_new = energy(trial)
            if e_new <= e:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            break
        gain = e - e_new
        q, e, mu = trial, e_new, max(mu / 10.0, 1e-9)
        history.append(e)
        if gain <= 1e-12 * max(e, 1e-30):
            break
    tb, tj, beta, psi, step = unpack(q)
    out_sim = _apply_step(sim, step)
    out = PoseParams(tb, tj, beta, psi)
    pv = tuple(T.Var(x) for x in (out.theta_body, out.theta_jaw, out.beta, out.psi))
    total, parts = registration_energy(model, out_sim, pv, b, lms, cfg, tree_b)
    return out, out_sim, float(T.value(total)), parts, history


def _compose(sim: Similarity, params) -> Similarity:
    """Fold the global correction into the similarity."""
    gs = float(np.exp(params["log_scale"][0]))
    Rg = rotation_matrix(params["omega"])
    c = sim.translation
    return Similarity(gs * sim.scale, Rg @ sim.rotation, gs * Rg @ (sim.translation - c) + c + params["shift"])


def register(model: SkinnedModel, scan: TriMesh, scan_landmarks, config: RegistrationConfig | None = None):
    """Landmark similarity, Chamfer refinement, full fit, then rig transfer.

    Returns ``(RegistrationResult, RiggedTemplate)``.
    """
    cfg = config or RegistrationConfig()
    rest = model.rest.vertices
    sim = fit_similarity(rest[model.landmarks], scan_landmarks)
    sim = refine_chamfer(model.rest, scan, sim, max_iters=cfg.refine_iters)
    res = fit_full(model, scan, scan_landmarks, cfg, similarity=sim)
    template = transfer_rig(model, scan, res.params, sim)
    template.registration["energies"] = res.energies
    return res, template


def chamfer_after(model, result: RegistrationResult, scan):
    from .body_model import evaluate
    v = result.similarity.apply(evaluate(model, result.params).vertices)
    return chamfer_distance(v, getattr(scan, "vertices", scan))
