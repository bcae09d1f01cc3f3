"""A small reverse-mode differentiation tape over numpy arrays.

Operations on :class:`Var` objects record a backward closure on the tape
of their inputs. ``Tape.backward`` replays those closures in reverse
recording order, which is a valid reverse topological order because a
node can only be recorded after all of its inputs exist.
"""

from __future__ import annotations

import numpy as np


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "tape", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Var defer to Var

    def __init__(self, value, tape=None):
        self.value = value
        self.grad = None
        self.tape = tape

    @property
    def requires_grad(self):
        return self.tape is not None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}, grad={self.requires_grad})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records one evaluation; ``backward`` visits each node once."""

    def __init__(self):
        self.nodes = []
        self._params = {}
        self._done = False

    def leaf(self, value):
        return Var(np.asarray(value), self)

    def param(self, array):
        """Leaf bound to a parameter array; repeated calls share one Var."""
        key = id(array)
        v = self._params.get(key)
        if v is None:
            v = Var(array, self)
            self._params[key] = v
        return v

    def grad_of(self, array):
        v = self._params.get(id(array))
        if v is None or v.grad is None:
            return np.zeros_like(array)
        return v.grad

    def record(self, out, inputs, backward):
        self.nodes.append(_Node(out, inputs, backward))

    def backward(self, out, upstream=None):
        if not isinstance(out, Var) or out.tape is not self:
            raise TapeError("output was not recorded on this tape")
        if self._done:
            raise TapeError("tape already consumed by a backward pass")
        if upstream is None:
            if out.value.size != 1:
                raise TapeError("upstream gradient required for non-scalar output")
            upstream = np.ones_like(out.value)
        upstream = np.asarray(upstream, dtype=out.value.dtype)
        if upstream.shape != out.value.shape:
            raise TapeError(f"upstream shape {upstream.shape} != output shape {out.value.shape}")
        out.grad = upstream.copy()
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not isinstance(inp, Var) or inp.tape is None:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=inp.value.dtype, copy=True).reshape(inp.value.shape)
                else:
                    inp.grad += gi
        # drop the graph so intermediates are freed without waiting for the cycle collector
        self.nodes = []
        self._done = True


# --- helpers -----------------------------------------------------------------


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = x.tape
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _make(out_value, inputs, backward):
    tape = _tape_of(*inputs)
    out = Var(out_value, tape)
    if tape is not None:
        tape.record(out, inputs, backward)
    return out


def custom(out_value, inputs, backward):
    """Record a user-defined op: ``backward(g)`` returns one grad per input."""
    return _make(out_value, tuple(inputs), backward)


# --- elementwise arithmetic ------------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g, np.shape(av)), _unbroadcast(-g, np.shape(bv))))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g * bv, np.shape(av)), _unbroadcast(g * av, np.shape(bv))))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bv, np.shape(av)),
                                         _unbroadcast(-g * out / bv, np.shape(bv))))


def power(a, p):
    av = value(a)
    out = av**p
    return _make(out, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a):
    av = value(a)
    return _make(av * av, (a,), lambda g: (2 * g * av,))


def exp(a):
    out = np.exp(value(a))
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return _make(np.log(av), (a,), lambda g: (g / av,))


def sin(a):
    av = value(a)
    return _make(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = value(a)
    return _make(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def sqrt(a):
    out = np.sqrt(value(a))
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def abs_(a):
    av = value(a)
    return _make(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def relu(a):
    av = value(a)
    mask = av > 0
    return _make(av * mask, (a,), lambda g: (g * mask,))


def softplus(a):
    av = value(a)
    out = np.logaddexp(0, av).astype(av.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * _sigmoid(av),))


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(np.asarray(value(a)))
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def huber(a, delta):
    """Elementwise Huber: ``0.5 r^2 / delta`` below ``delta``, ``|r| - delta/2`` above."""
    av = value(a)
    small = np.abs(av) <= delta
    out = np.where(small, 0.5 * av * av / delta, np.abs(av) - 0.5 * delta).astype(av.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * np.where(small, av / delta, np.sign(av)).astype(av.dtype, copy=False),))


# --- reductions and shape ----------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    av = value(a)
    return _make(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    av = value(a)
    out = av[idx]

    def bw(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.asarray(out), (a,), bw)


def take(a, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate on backward."""
    av = value(a)
    indices = np.asarray(indices)
    out = np.take(av, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(av)
        gm = np.moveaxis(g, axis, 0).reshape((indices.size,) + tuple(np.delete(av.shape, axis)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices.reshape(-1), gm)
        return (full,)

    return _make(out, (a,), bw)


def concat(xs, axis=-1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(xs), bw)


def stack(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _make(out, tuple(xs), bw)


def where(mask, a, b):
    av, bv = value(a), value(b)
    out = np.where(mask, av, bv)
    return _make(out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0), np.shape(av)),
                                         _unbroadcast(np.where(mask, 0, g), np.shape(bv))))


# --- linear algebra -----------------------------------------------------------------


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv

    def bw(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if bv.ndim == 1:
            return np.multiply.outer(g, bv), _unbroadcast(np.einsum("...i,...ij->j", g, av), bv.shape)
        if av.ndim == 1:
            return np.einsum("...j,...ij->i", g, bv), np.multiply.outer(av, g)
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(out, (a, b), bw)


def einsum(spec, a, b):
    """Two-operand einsum; every operand index must occur in the other operand or the output."""
    ins, out_idx = spec.replace(" ", "").split("->")
    ia, ib = ins.split(",")
    av, bv = value(a), value(b)
    out = np.einsum(spec, av, bv)
    for own, other in ((ia, ib), (ib, ia)):
        for ch in own:
            if ch not in other and ch not in out_idx:
                raise ValueError(f"index {ch!r} is summed within one operand; not supported")

    def bw(g):
        return (np.einsum(f"{out_idx},{ib}->{ia}", g, bv), np.einsum(f"{out_idx},{ia}->{ib}", g, av))

    return _make(out, (a, b), bw)


def cross(a, b):
    av, bv = value(a), value(b)
    out = np.cross(av, bv)
    return _make(out, (a, b), lambda g: (_unbroadcast(np.cross(bv, g), np.shape(av)),
                                         _unbroadcast(np.cross(g, av), np.shape(bv))))


def rodrigues(a):
    """Batched axis-angle ``(..., 3)`` to rotation matrices ``(..., 3, 3)``.

    The derivative uses the closed form of Gallego and Yezzi (2015), with
    the exact small-angle limit dR/da_i = [e_i]x below 1e-8 rad.
    """
    av = np.asarray(value(a))
    flat = av.reshape(-1, 3)
    n = len(flat)
    R = np.empty((n, 3, 3), dtype=av.dtype)
    for i, v in enumerate(flat):
        R[i] = _rodrigues_np(v)

    def bw(g):
        gf = g.reshape(n, 3, 3)
        out = np.empty((n, 3), dtype=av.dtype)
        for i, v in enumerate(flat):
            dR = _rodrigues_jac(v, R[i])
            out[i] = np.einsum("kij,ij->k", dR, gf[i])
        return (out.reshape(av.shape),)

    return _make(R.reshape(av.shape[:-1] + (3, 3)), (a,), bw)


def _hat(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]], dtype=np.float64)


def _rodrigues_np(v):
    v = np.asarray(v, dtype=np.float64)
    th = np.sqrt(v @ v)
    k = _hat(v)
    if th < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return np.eye(3) + np.sin(th) / th * k + (1.0 - np.cos(th)) / (th * th) * (k @ k)


def _rodrigues_jac(v, R):
    v = np.asarray(v, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    th2 = v @ v
    eye = np.eye(3)
    if th2 < 1e-16:
        return np.stack([_hat(eye[i]) for i in range(3)])
    vx = _hat(v)
    out = np.empty((3, 3, 3))
    ImR = eye - R
    for i in range(3):
        out[i] = (v[i] * vx + _hat(np.cross(v, ImR[:, i]))) / th2 @ R
    return out


def bilinear_sample(image, uv):
    """Sample ``image`` (H, W, C) at continuous pixel coords ``uv`` (N, 2).

    Pixel centers sit at integer coordinates; lookups clamp to the border.
    Differentiable with respect to ``uv`` only.
    """
    img = np.asarray(image)
    uvv = value(uv)
    H, W = img.shape[:2]
    x = np.clip(uvv[:, 0], 0.0, W - 1.0)
    y = np.clip(uvv[:, 1], 0.0, H - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 2) if W > 1 else np.zeros(len(x), np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 2) if H > 1 else np.zeros(len(y), np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    c00, c01, c10, c11 = img[y0, x0], img[y0, x1], img[y1, x0], img[y1, x1]
    out = (c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy) + c10 * (1 - fx) * fy + c11 * fx * fy)
    inside_x = ((uvv[:, 0] > 0) & (uvv[:, 0] < W - 1))[:, None]
    inside_y = ((uvv[:, 1] > 0) & (uvv[:, 1] < H - 1))[:, None]

    def bw(g):
        dx = ((c01 - c00) * (1 - fy) + (c11 - c10) * fy) * inside_x
        dy = ((c10 - c00) * (1 - fx) + (c11 - c01) * fx) * inside_y
        return (np.stack([np.sum(g * dx, axis=1), np.sum(g * dy, axis=1)], axis=1).astype(uvv.dtype),)

    return _make(out.astype(uvv.dtype, copy=False), (uv,), bw)
