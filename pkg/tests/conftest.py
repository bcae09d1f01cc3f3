import numpy as np
import pytest

from volavatar import _accel


def random_mesh(rng, n_tri=200, scale=1.0):
    """Triangle soup with shared vertices: a jittered grid surface folded in 3D."""
    side = max(2, int(np.ceil(np.sqrt(n_tri / 2))) + 1)
    u, v = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    z = 0.3 * np.sin(3 * u + rng.uniform(0, 3)) * np.cos(2 * v) + 0.02 * rng.normal(size=u.shape)
    verts = np.stack([u + 0.01 * rng.normal(size=u.shape), v, z], axis=-1).reshape(-1, 3) * scale
    tris = []
    for i in range(side - 1):
        for j in range(side - 1):
            a, b, c, d = i * side + j, (i + 1) * side + j, i * side + j + 1, (i + 1) * side + j + 1
            tris += [(a, b, c), (b, d, c)]
    tris = np.array(tris[:n_tri])
    from volavatar.geometry import TriMesh
    return TriMesh(verts, tris)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    with _accel.using_backend(request.param):
        yield request.param


@pytest.fixture(scope="session")
def head():
    from volavatar.synth import build_head
    return build_head()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six-frame 32x32 jaw_head dataset (2 static, 2 expression, 2 talking, 1 test)."""
    from volavatar.synth import synth_generate
    out = tmp_path_factory.mktemp("tiny")
    synth_generate("jaw_head", 6, 3, str(out), size=32, n_static=2, n_expression=2)
    return str(out)
