"""Adam with per-group learning rates and step-based schedules."""

from __future__ import annotations

import numpy as np


def constant():
    return lambda step: 1.0


def halving(every):
    """Learning-rate factor halved every ``every`` steps."""
    return lambda step: 0.5 ** (step // every)


def exponential(total_steps, final_factor=0.33):
    """Smooth decay reaching ``final_factor`` after ``total_steps``."""
    return lambda step: final_factor ** (min(step, total_steps) / max(total_steps, 1))


class Adam:
    """Bias-corrected Adam over named parameter arrays, updated in place.

    ``groups`` maps a group name to ``(params dict, base lr)``. The
    schedule returns a multiplicative factor of the step count before the
    update is applied.
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, eps=1e-8, schedule=None):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.schedule = schedule or constant()
        self.groups = {}
        self.m, self.v = {}, {}
        for gname, (params, lr) in groups.items():
            self.groups[gname] = (params, float(lr))
            for k, p in params.items():
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
        self.step_count = 0

    def lr(self, group):
        return self.groups[group][1] * self.schedule(self.step_count)

    def step(self, grads, rows=None):
        """Apply one update; ``grads`` maps parameter names to gradients.

        Parameters without an entry in ``grads`` receive a zero gradient
        (their moments still decay). ``rows`` optionally restricts named
        parameters to a subset of leading-axis rows, e.g. the per-frame
        blend weights of the frame in the current batch.
        """
        factor = self.schedule(self.step_count)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        rows = rows or {}
        for params, base_lr in self.groups.values():
            lr = base_lr * factor
            for k, p in params.items():
                g = grads.get(k)
                m, v = self.m[k], self.v[k]
                sel = rows.get(k)
                if sel is not None:
                    p, m, v = p[sel], m[sel], v[sel]
                    if g is not None:
                        g = g[sel]
                if g is None:
                    m *= self.beta1
                    v *= self.beta2
                else:
                    m *= self.beta1
                    m += (1.0 - self.beta1) * g
                    v *= self.beta2
                    v += (1.0 - self.beta2) * (g * g)
                upd = (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
                if sel is not None:
                    params[k][sel] -= upd.astype(p.dtype, copy=False)
                    self.m[k][sel] = m
                    self.v[k][sel] = v
                else:
                    p -= upd.astype(p.dtype, copy=False)

    def state(self):
        """Moments and step count as named arrays (for checkpoints)."""
        out = {"adam.step": np.array([self.step_count], dtype=np.int64)}
        for k in self.m:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
        return out

    def load_state(self, blobs):
        self.step_count = int(blobs["adam.step"][0])
        for k in self.m:
            if f"adam.m/{k}" in blobs:
                self.m[k][...] = blobs[f"adam.m/{k}"]
                self.v[k][...] = blobs[f"adam.v/{k}"]

