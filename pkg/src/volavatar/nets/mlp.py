"""Fully connected networks on top of the tape."""

from __future__ import annotations

import numpy as np

from . import tape as T

ACTIVATIONS = {
    None: lambda x: x,
    "none": lambda x: x,
    "relu": T.relu,
    "softplus": T.softplus,
    "sigmoid": T.sigmoid,
}


class ShapeError(ValueError):
    pass


class Mlp:
    """Affine layers with ReLU between them and a chosen output activation.

    ``widths`` lists every layer width including input and output, so a
    net with ``len(widths) - 1`` linear layers. Weights use He-uniform
    init; ``zero_last`` zeroes the final layer so outputs start at
    ``act(0)``.
    """

    def __init__(self, widths, out_act=None, zero_last=False, seed=0, dtype=np.float32, name="mlp"):
        if len(widths) < 2:
            raise ShapeError("an MLP needs at least input and output widths")
        self.widths = [int(w) for w in widths]
        self.out_act = out_act
        self.name = name
        self.zero_last = zero_last
        rng = np.random.default_rng(seed)
        self.params = {}
        n_layers = len(self.widths) - 1
        for i in range(n_layers):
            fan_in, fan_out = self.widths[i], self.widths[i + 1]
            if zero_last and i == n_layers - 1:
                w = np.zeros((fan_in, fan_out), dtype=dtype)
            else:
                bound = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            self.params[f"{name}.w{i}"] = w
            self.params[f"{name}.b{i}"] = np.zeros(fan_out, dtype=dtype)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def __call__(self, x, tape=None, return_hidden=False):
        """Apply the network; parameters join ``tape`` when one is given."""
        xv = T.value(x)
        if xv.ndim != 2 or xv.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected input (N, {self.in_dim}), got {xv.shape}")
        h = x
        hidden = None
        for i in range(self.n_layers):
            w = self.params[f"{self.name}.w{i}"]
            b = self.params[f"{self.name}.b{i}"]
            if tape is not None:
                w, b = tape.param(w), tape.param(b)
            h = T.add(T.matmul(h, w), b)
            if i < self.n_layers - 1:
                h = T.relu(h)
                hidden = h
        out = ACTIVATIONS[self.out_act](h)
        return (out, hidden) if return_hidden else out

    def grads(self, tape):
        return {k: tape.grad_of(v) for k, v in self.params.items()}

    def n_params(self):
        return sum(v.size for v in self.params.values())


def forward(mlp: Mlp, x):
    """Evaluate ``mlp`` on a batch, recording a fresh tape.

    Returns ``(output Var, tape)``; the input joins the tape so
    :func:`backward` also yields the input gradient.
    """
    tape = T.Tape()
    xin = tape.leaf(np.asarray(x, dtype=next(iter(mlp.params.values())).dtype))
    out = mlp(xin, tape)
    tape.input_var = xin
    tape.mlp = mlp
    tape.output = out
    return out, tape


def backward(tape, out, upstream):
    """Parameter and input gradients for ``sum(upstream * out)``."""
    if getattr(tape, "output", None) is not out:
        raise T.TapeError("tape does not belong to this forward output")
    tape.backward(out, upstream)
    xin = tape.input_var
    gx = xin.grad if xin.grad is not None else np.zeros_like(xin.value)
    return tape.mlp.grads(tape), gx
