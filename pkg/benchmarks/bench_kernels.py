"""Timing of the hot kernels on the numba and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 5] [--quick]

Each kernel runs once per backend to warm up (numba compiles on first
call), then ``--repeat`` times; the best wall time is reported.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from volavatar import _accel, bvh
from volavatar.encoding import HashGrid, grid_backward
from volavatar.geometry import TriMesh, brute_force_nearest
from volavatar.renderer import composite
from volavatar.nets import tape as T


def folded_sheet(rng, n_tri):
    side = int(np.ceil(np.sqrt(n_tri / 2))) + 1
    u, v = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    z = 0.3 * np.sin(3 * u) * np.cos(2 * v)
    verts = np.stack([u, v, z], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(side - 1), np.arange(side - 1), indexing="ij")
    a = (i * side + j).ravel()
    tris = np.concatenate([np.stack([a, a + side, a + 1], 1), np.stack([a + side, a + side + 1, a + 1], 1)])
    return TriMesh(verts, tris[:n_tri])


def best_time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng, quick):
    n_tri = 1000 if quick else 5000
    n_q = 2000 if quick else 10_000
    mesh = folded_sheet(rng, n_tri)
    q = rng.uniform(-0.2, 1.2, size=(n_q, 3))
    tree = bvh.build(mesh)
    yield f"bvh nearest ({n_tri} tris, {n_q} pts)", lambda: bvh.nearest_triangles(tree, q)
    yield f"brute nearest ({n_tri} tris, {n_q} pts)", lambda: brute_force_nearest(mesh.corners(), q)
    yield f"bvh build ({n_tri} tris)", lambda: bvh.build(mesh)

    grid = HashGrid(n_levels=16, table_size=2**17 if not quick else 2**14, n_features=4, n_min=16, n_max=2048,
                    dtype=np.float32)
    n_pts = 20_000 if quick else 100_000
    x = rng.uniform(-0.9, 0.9, size=(n_pts, 3))
    up = rng.normal(size=(n_pts, grid.out_dim)).astype(np.float32)
    yield f"hash grid forward ({n_pts} pts)", lambda: grid.query(x)
    yield f"hash grid backward ({n_pts} pts)", lambda: grid_backward(grid, x, up)

    n_rays, per = (1024, 32) if quick else (4096, 64)
    offsets = np.arange(n_rays + 1) * per
    sigma = rng.uniform(0, 20, n_rays * per).astype(np.float32)
    color = rng.uniform(0, 1, (n_rays * per, 3)).astype(np.float32)
    delta = np.full(n_rays * per, 0.01, dtype=np.float32)

    def comp():
        tape = T.Tape()
        s, c = tape.param(sigma), tape.param(color)
        C, g = composite(s, c, delta, offsets)
        tape.backward(T.add(T.sum_(C), T.sum_(g)))

    yield f"composite fwd+bwd ({n_rays} rays x {per})", comp


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller problem sizes")
    args = ap.parse_args(argv)
    backends = ["numba", "numpy"] if _accel.NUMBA_AVAILABLE else ["numpy"]
    rows = []
    for name, fn in cases(np.random.default_rng(0), args.quick):
        times = {}
        for b in backends:
            with _accel.using_backend(b):
                times[b] = best_time(fn, args.repeat)
        rows.append((name, times))
    w = max(len(r[0]) for r in rows)
    print(f"{'kernel':{w}s}  " + "  ".join(f"{b:>10s}" for b in backends) + ("     ratio" if len(backends) > 1 else ""))
    for name, times in rows:
        line = f"{name:{w}s}  " + "  ".join(f"{times[b] * 1e3:8.2f}ms" for b in backends)
        if len(backends) > 1:
            line += f"  {times['numpy'] / times['numba']:7.1f}x"
        print(line)


if __name__ == "__main__":
    main()
