import numpy as np
import pytest

from gradcheck import numeric_grad, rel_err, sample_idx
from volavatar.body_model import uv_sphere
from volavatar.deformation import BlendFieldBasis, CoarseField
from volavatar.geometry import Camera, TriMesh, look_at
from volavatar.nets import tape as T
from volavatar.renderer import (PHASE_A, PHASE_B, AppearanceField, PatchError, avg_pool, composite, generate_rays,
                                loss_beta, loss_color, loss_downsample, loss_perceptual, query_appearance,
                                sample_ray, total_loss)

GRID = dict(n_levels=4, table_size=2**10, n_features=2, n_min=4, n_max=32)


def _cam(size=64):
    return Camera(look_at(np.array([0.0, 0.0, -3.0]), np.zeros(3)), 60.0, 60.0, size / 2, size / 2, size, size)


@pytest.fixture(scope="module")
def sphere_field():
    v, t = uv_sphere(40, 80, (0.5, 0.5, 0.5))
    m = TriMesh(v, t, labels=np.zeros(len(v), np.uint8))
    return CoarseField(m, m)


def test_ray_generation():
    cam = _cam()
    rays = generate_rays(cam, (16, 16), 32, (np.zeros(3), 1.0))
    assert len(rays) == 1024
    centre = generate_rays(cam, (31, 31), 2, (np.zeros(3), 1.0))
    # the optical axis passes through the shared corner of the four central pixels
    np.testing.assert_allclose(centre.dirs.mean(0) / np.linalg.norm(centre.dirs.mean(0)), [0, 0, 1], atol=1e-12)
    corner = generate_rays(cam, (0, 0), 1, (np.zeros(3), 0.2))
    assert not corner.valid[0]
    with pytest.raises(PatchError):
        generate_rays(cam, (40, 40), 32, (np.zeros(3), 1.0))


def test_vacuous_ray_composites_to_white():
    C, g = composite(np.zeros(0), np.zeros((0, 3)), np.zeros(0), np.array([0, 0]))
    np.testing.assert_array_equal(T.value(C), [[1.0, 1.0, 1.0]])
    assert T.value(g)[0] == 0.0


def test_sampling_far_and_through(sphere_field):
    s = sample_ray([0, 2.0, -2.0], [0, 0, 1.0], 0.0, 4.0, sphere_field)
    assert len(s.t) == 0
    s = sample_ray([0, 0, -2.0], [0, 0, 1.0], 1.4, 2.6, sphere_field)
    t = s.t
    assert np.all(np.diff(t) > 0)
    for c in (1.5, 2.5):
        assert np.any((t < c - 1e-3) & (t > c - 0.05)) and np.any((t > c + 1e-3) & (t < c + 0.05))
    assert np.all(np.abs(np.abs(t - 2.0) - 0.5) <= 0.05 + 1e-3)


def test_composite_examples():
    C, g = composite(np.array([1e9]), np.array([[0.2, 0.4, 0.6]]), np.array([1.0]), np.array([0, 1]))
    np.testing.assert_allclose(T.value(C), [[0.2, 0.4, 0.6]], atol=1e-12)
    assert T.value(g)[0] == pytest.approx(1.0)
    tau = np.log(2.0)
    cols = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    C, g = composite(np.array([tau, tau]), cols, np.ones(2), np.array([0, 2]))
    assert T.value(g)[0] == pytest.approx(0.75)
    np.testing.assert_allclose(T.value(C)[0], [0.5 + 0.25, 0.25 + 0.25, 0.25], atol=1e-12)


def test_zero_density_sample_is_neutral(rng):
    sig = rng.uniform(0, 3, 5)
    col = rng.uniform(size=(5, 3))
    d = rng.uniform(0.01, 0.1, 5)
    C, g = composite(sig, col, d, np.array([0, 5]))
    C2, g2 = composite(np.insert(sig, 2, 0.0), np.insert(col, 2, [0.3, 0.3, 0.3], axis=0), np.insert(d, 2, 0.05),
                       np.array([0, 6]))
    np.testing.assert_allclose(T.value(C2), T.value(C), atol=1e-15)
    np.testing.assert_allclose(T.value(g2), T.value(g), atol=1e-15)


def test_composite_gradient_and_bounds(rng, backend):
    offs = np.array([0, 3, 3, 7])
    sig = rng.uniform(0, 20, 7)
    col = rng.uniform(size=(7, 3))
    d = rng.uniform(0.01, 0.2, 7)
    up = rng.normal(size=(3, 4))

    def f():
        C, g = composite(sig, col, d, offs)
        return float(np.sum(T.value(C) * up[:, :3]) + np.sum(T.value(g) * up[:, 3]))

    tape = T.Tape()
    sv, cv = tape.leaf(sig.copy()), tape.leaf(col.copy())
    C, g = composite(sv, cv, d, offs)
    tape.backward(T.add(T.sum_(T.mul(C, up[:, :3])), T.sum_(T.mul(g, up[:, 3]))))
    assert rel_err(sv.grad, numeric_grad(f, sig)) < 1e-6
    assert rel_err(cv.grad, numeric_grad(f, col)) < 1e-6
    gv = T.value(composite(sig * 100, col, d, offs)[1])
    assert np.all((gv >= 0) & (gv <= 1))


def test_losses_examples(rng):
    a = rng.uniform(size=(1024, 3))
    assert float(T.value(loss_color(a, a))) == 0
    assert float(T.value(loss_color(a + 0.05, a))) == pytest.approx(0.5 * 0.05**2 / 0.1)
    b = rng.uniform(size=(1024, 3))
    assert float(T.value(loss_color(a, b))) == pytest.approx(float(T.value(loss_color(b, a))), rel=1e-12)
    assert float(T.value(loss_downsample(a + 0.1, a))) == pytest.approx(0.3)
    perm = a.reshape(32, 32, 3).copy()
    perm[:4, :4] = perm[:4, :4][::-1, ::-1]
    assert float(T.value(loss_downsample(perm, a))) == pytest.approx(0.0, abs=1e-12)
    assert float(T.value(loss_beta(np.ones(4)))) == pytest.approx(0.0, abs=1e-6)
    assert float(T.value(loss_beta(np.zeros(4)))) == 0.0
    assert float(T.value(loss_beta(np.full(4, 0.5)))) == pytest.approx(0.5 * np.log(2), rel=1e-6)


def test_perceptual_loss(rng):
    a = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    b = rng.uniform(size=(32, 32, 3)).astype(np.float32)
    assert float(T.value(loss_perceptual(a, a))) == 0
    v = float(T.value(loss_perceptual(a, b)))
    assert v > 0 and v == float(T.value(loss_perceptual(a, b)))
    with pytest.raises(PatchError):
        loss_perceptual(a[:16, :16], b[:16, :16])


def test_loss_gradients(rng):
    a = rng.uniform(size=(32, 32, 3))
    b = rng.uniform(size=(32, 32, 3))
    gam = rng.uniform(0.05, 0.95, 50)
    cases = [(lambda x: loss_color(x, b), a), (lambda x: loss_downsample(x, b), a),
             (lambda x: loss_perceptual(x, b), a), (lambda x: loss_beta(x), gam)]
    for fn, x in cases:
        tape = T.Tape()
        v = tape.leaf(x.copy())
        tape.backward(fn(v))
        idx = sample_idx(rng, x.size, 40)
        fd = numeric_grad(lambda: float(T.value(fn(x))), x, idx=idx)
        assert rel_err(v.grad.ravel()[idx], fd) < 1e-5


def test_avg_pool_errors():
    with pytest.raises(PatchError):
        avg_pool(np.zeros((30, 30, 3)), 4)


def test_total_loss_phases():
    parts = {"color": 2.0, "perceptual": 3.0, "downsample": 5.0, "beta": 7.0}
    assert float(T.value(total_loss(parts, PHASE_A))) == pytest.approx(2.0 + 0.7)
    assert float(T.value(total_loss(parts, PHASE_B))) == pytest.approx(0.35 * 3 + 0.035 * 5 + 0.7)
    assert float(T.value(total_loss(dict.fromkeys(parts, 0.0), PHASE_B))) == 0.0


def test_query_zero_init(sphere_field, rng):
    app = AppearanceField(GRID, zero_init=True)
    x = rng.uniform(-0.5, 0.5, (20, 3))
    d = rng.normal(size=(20, 3))
    sig, c = query_appearance(app, None, sphere_field, x, d)
    np.testing.assert_allclose(T.value(sig), np.log(2.0), rtol=1e-6)
    np.testing.assert_allclose(T.value(c), 0.5, rtol=1e-6)


def test_query_identity_composition(sphere_field, rng):
    app = AppearanceField(GRID, seed=3, dtype=np.float64)
    basis = BlendFieldBasis(k=2, grid_kw=GRID, hidden=(8,), seed=1, dtype=np.float64)
    x = rng.uniform(-0.5, 0.5, (20, 3))
    d = rng.normal(size=(20, 3))
    s1, c1 = query_appearance(app, basis, sphere_field, x, d, w=np.array([0.3, -0.2]))
    s2, c2 = app(x, d)
    np.testing.assert_allclose(T.value(s1), T.value(s2), atol=1e-12)
    np.testing.assert_allclose(T.value(c1), T.value(c2), atol=1e-12)


def test_density_gradient_wrt_grid(rng):
    app = AppearanceField(GRID, seed=4, dtype=np.float64)
    app.grid.table[...] = rng.normal(scale=0.5, size=app.grid.table.shape)
    x = rng.uniform(-0.9, 0.9, (10, 3))
    d = rng.normal(size=(10, 3))
    tape = T.Tape()
    sig, _ = app(x, d, tape=tape)
    tape.backward(T.sum_(sig))
    g = tape.grad_of(app.grid.table).ravel()
    idx = np.flatnonzero(g)[:30]
    fd = numeric_grad(lambda: float(np.sum(T.value(app(x, d)[0]))), app.grid.table, idx=idx)
    assert rel_err(g[idx], fd) < 1e-6
