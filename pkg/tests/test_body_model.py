import numpy as np
import pytest

from volavatar.body_model import (DimensionError, MisalignmentError, PoseParams, RigFormatError, RigInvariantError,
                                  SkinnedModel, evaluate, evaluate_template, load_rig, make_cylinder_rig,
                                  make_head_rig, save_rig, transfer_rig)
from volavatar.geometry import TriMesh
from volavatar.nets.tape import rodrigues, value


@pytest.fixture(scope="module")
def cyl():
    return make_cylinder_rig()


def test_cylinder_fixture_loads(cyl, tmp_path):
    save_rig(cyl, tmp_path / "c.rig")
    back = load_rig(tmp_path / "c.rig")
    assert back.n_joints == 2


def test_round_trip_bit_identical(head, tmp_path):
    _, _, template = head
    save_rig(template, tmp_path / "a.rig")
    back = load_rig(tmp_path / "a.rig")
    save_rig(back, tmp_path / "b.rig")
    assert (tmp_path / "a.rig").read_bytes() == (tmp_path / "b.rig").read_bytes()
    np.testing.assert_array_equal(back.weights, template.weights.astype(np.float32))
    np.testing.assert_array_equal(back.correspondence, template.correspondence)


def test_weight_row_invariant(cyl):
    w = cyl.weights.copy()
    w[3] *= 0.9
    with pytest.raises(RigInvariantError, match="row 3"):
        SkinnedModel(cyl.rest, cyl.parents, cyl.joints, w, cyl.shapedirs, cyl.exprdirs, cyl.landmarks)


def test_tree_invariant(cyl):
    with pytest.raises(RigInvariantError):
        SkinnedModel(cyl.rest, [-1, -1], cyl.joints, cyl.weights, cyl.shapedirs, cyl.exprdirs, cyl.landmarks)


def test_format_errors(tmp_path):
    p = tmp_path / "x.rig"
    p.write_bytes(b"NOPE" + b"\0" * 10)
    with pytest.raises(RigFormatError):
        load_rig(p)
    p.write_bytes(b"RIG1\x05\x00\x00\x00{bad")
    with pytest.raises(RigFormatError):
        load_rig(p)


def test_zero_pose_is_rest_exactly(head):
    model, _, _ = head
    out = evaluate(model, PoseParams.zeros(model))
    np.testing.assert_array_equal(out.vertices, model.rest.vertices)


def test_single_joint_rigid_rotation(rng):
    v = rng.normal(size=(20, 3))
    rest = TriMesh(v, np.array([[0, 1, 2]]), labels=np.zeros(20, np.uint8))
    j = np.array([0.3, -0.2, 0.5])
    m = SkinnedModel(rest, [-1], [j], np.ones((20, 1)), np.zeros((20, 3, 0)), np.zeros((20, 3, 0)), [0])
    r = np.array([0.4, -0.7, 0.2])
    R = value(rodrigues(r[None]))[0]
    out = evaluate(m, PoseParams([r], np.zeros(3), [], []))
    np.testing.assert_allclose(out.vertices, (v - j) @ R.T + j, atol=1e-12)


def test_root_rigid_equivariance(head):
    model, _, _ = head
    p = PoseParams.zeros(model)
    p.theta_body[1] = [0.1, 0.05, 0.0]
    p.theta_jaw[:] = [0.2, 0, 0]
    p.psi[:] = np.linspace(-1, 1, model.n_expr)
    base = evaluate(model, p).vertices
    r = np.array([0.3, -0.5, 0.2])
    p2 = p.copy()
    p2.theta_body[0] = r
    R = value(rodrigues(r[None]))[0]
    j0 = model.joints[0]
    np.testing.assert_allclose(evaluate(model, p2).vertices, (base - j0) @ R.T + j0, atol=1e-6)


def test_expression_unit_vector(head):
    model, _, _ = head
    for k in (0, 7):
        p = PoseParams.zeros(model)
        p.psi[k] = 1.0
        np.testing.assert_allclose(evaluate(model, p).vertices, model.rest.vertices + model.exprdirs[:, :, k],
                                   atol=1e-12)


def test_expression_linearity(head, rng):
    model, _, _ = head
    z = PoseParams.zeros(model)
    rest = model.rest.vertices
    p1, p2 = rng.normal(size=model.n_expr), rng.normal(size=model.n_expr)
    d = lambda psi: evaluate(model, z.with_(psi=psi)).vertices - rest  # noqa: E731
    np.testing.assert_allclose(d(2.0 * p1 - 0.5 * p2), 2.0 * d(p1) - 0.5 * d(p2), atol=1e-6)


def test_dimension_mismatch(head):
    model, _, _ = head
    with pytest.raises(DimensionError):
        evaluate(model, PoseParams.zeros(model).with_(psi=np.zeros(3)))


def test_self_transfer_rows_match(head):
    model, scan, template = head
    np.testing.assert_array_equal(template.weights, model.weights)
    np.testing.assert_array_equal(template.correspondence, np.arange(model.rest.n_vertices))
    np.testing.assert_allclose(template.weights.sum(axis=1), 1.0, atol=1e-6)


def test_transfer_tie_breaks_to_lowest():
    v = np.array([[2.0, 0, 0], [0.0, 0, 0], [0, 2.0, 0]])
    w = np.array([[1.0, 0], [0, 1.0], [0.5, 0.5]])
    m = SkinnedModel(TriMesh(v, np.array([[0, 1, 2]]), labels=np.zeros(3, np.uint8)), [-1, 0], np.zeros((2, 3)), w,
                     np.zeros((3, 3, 0)), np.zeros((3, 3, 0)), [0])
    scan = TriMesh(np.array([[1.0, 0, 0], [0.05, 0, 0], [0, 1.95, 0]]), np.array([[0, 1, 2]]))
    t = transfer_rig(m, scan, PoseParams(np.zeros((2, 3)), np.zeros(3), [], []))
    np.testing.assert_array_equal(t.correspondence, [0, 1, 2])
    np.testing.assert_array_equal(t.weights, w)


def test_transfer_misaligned(cyl):
    scan = TriMesh(cyl.rest.vertices + 5.0, cyl.rest.triangles)
    with pytest.raises(MisalignmentError):
        transfer_rig(cyl, scan, PoseParams.zeros(cyl))


def test_template_matches_model_on_self_transfer(head, rng):
    model, scan, template = head
    p = PoseParams.zeros(model)
    p.theta_jaw[:] = [0.25, 0.02, 0]
    p.psi[:] = rng.normal(size=model.n_expr)
    np.testing.assert_array_equal(evaluate_template(template, PoseParams.zeros(model)).vertices, scan.vertices)
    np.testing.assert_allclose(evaluate_template(template, p).vertices, evaluate(model, p).vertices, atol=1e-12)


def test_jaw_moves_only_weighted_vertices(head):
    _, _, template = head
    p = PoseParams.zeros(template)
    p.theta_jaw[:] = [0.3, 0, 0]
    moved = np.linalg.norm(evaluate_template(template, p).vertices - template.rest.vertices, axis=1) > 0
    np.testing.assert_array_equal(moved, template.weights[:, template.jaw_joint] > 0)


def test_head_rig_shape():
    m = make_head_rig()
    assert m.jaw_joint == 3 and m.n_expr == 10 and m.rest.n_triangles == 2160
