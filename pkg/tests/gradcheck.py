"""Central finite-difference helpers shared by the gradient tests."""

import numpy as np


def numeric_grad(f, x, eps=1e-6, idx=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (modified in place, restored)."""
    flat = x.reshape(-1)
    picks = range(flat.size) if idx is None else idx
    out = np.zeros(len(picks) if idx is not None else flat.size)
    for k, i in enumerate(picks):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def sample_idx(rng, size, k=24):
    return rng.choice(size, size=min(k, size), replace=False)
