"""Minimal reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records primitive operations whose inputs require gradients.
Operations on constants alone are not recorded, which keeps inference through
frozen networks free of tape overhead.

Broadcasting is restricted to scalar-tensor: an operand is either the same
shape as the other or a 0-d value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "tape", "requires_grad", "name")

    def __init__(self, data, tape=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, reciprocal(_lift(other)))

    def __rtruediv__(self, other):
        return mul(_lift(other), reciprocal(self))

    def __neg__(self):
        return neg(self)


def constant(data):
    return Tensor(data)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    out: Tensor
    fn: object  # forward: arrays -> array, used by replay
    vjp: object  # upstream grad -> tuple of input grads


@dataclass
class Tape:
    """Ordered record of operations plus a registry of named parameters."""

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def parameter(self, name, value):
        if name in self.params:
            raise ValueError(f"parameter {name!r} already registered")
        t = Tensor(np.array(value, dtype=np.float64, copy=True), self, True, name)
        self.params[name] = t
        return t

    def replay(self, values=None):
        """Re-run every recorded node, optionally with new parameter values.

        Returns the recomputed output array of the last node.
        """
        env = {}
        for name, t in self.params.items():
            v = t.data if values is None or name not in values else np.asarray(values[name], dtype=np.float64)
            env[id(t)] = v
        last = None
        for node in self.nodes:
            args = [env.get(id(i), i.data) for i in node.inputs]
            last = node.fn(*args)
            env[id(node.out)] = last
        return last


def _record(op, inputs, out_data, fn, vjp):
    tape = None
    for t in inputs:
        if t.requires_grad:
            tape = t.tape
            break
    if tape is None:
        return Tensor(out_data)
    out = Tensor(out_data, tape, True)
    tape.nodes.append(Node(op, tuple(inputs), out, fn, vjp))
    return out


def _pair(a, b, op):
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _fit(g, shape):
    """Reduce a gradient to a 0-d operand's shape."""
    if g.shape == shape:
        return g
    return np.asarray(g.sum())


# --- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data, np.add,
                   lambda g: (_fit(g, sa), _fit(g, sb)))


def mul(a, b):
    a, b = _pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd, np.multiply,
                   lambda g: (_fit(g * bd, ad.shape), _fit(g * ad, bd.shape)))


def neg(a):
    a = _lift(a)
    return _record("neg", (a,), -a.data, np.negative, lambda g: (-g,))


def exp(a):
    a = _lift(a)
    y = np.exp(a.data)
    return _record("exp", (a,), y, np.exp, lambda g: (g * y,))


def log(a):
    a = _lift(a)
    x = a.data
    return _record("log", (a,), np.log(x), np.log, lambda g: (g / x,))


def reciprocal(a):
    a = _lift(a)
    y = 1.0 / a.data
    return _record("reciprocal", (a,), y, np.reciprocal, lambda g: (-g * y * y,))


def abs(a):  # noqa: A001 - mirrors numpy naming
    a = _lift(a)
    s = np.sign(a.data)
    return _record("abs", (a,), np.abs(a.data), np.abs, lambda g: (g * s,))


def maximum(a, b):
    a, b = _pair(a, b, "maximum")
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _record("maximum", (a, b), np.maximum(a.data, b.data), np.maximum,
                   lambda g: (_fit(np.where(pick_a, g, 0.0), sa), _fit(np.where(pick_a, 0.0, g), sb)))


def relu(a):
    a = _lift(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda x: np.maximum(x, 0.0),
                   lambda g: (np.where(mask, g, 0.0),))


def _softplus(x):
    return np.logaddexp(0.0, x)


def softplus(a):
    a = _lift(a)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("softplus", (a,), _softplus(a.data), _softplus, lambda g: (g * sig,))


# --- reductions --------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _lift(a)
    shape = a.shape

    def fn(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), fn(a.data), fn, vjp)


def amax(a):
    """Maximum over all elements as a 0-d tensor; the gradient goes to the first argmax."""
    a = _lift(a)
    shape = a.shape

    def fn(x):
        return np.asarray(x.max())

    def vjp(g):
        out = np.zeros(shape)
        out.flat[int(np.argmax(a.data))] = g
        return (out,)

    return _record("amax", (a,), fn(a.data), fn, vjp)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- structural --------------------------------------------------------------

def take_channel(a, index):
    """``a[:, index:index+1]`` for a (B, C, ...) tensor."""
    a = _lift(a)
    if a.ndim < 2 or not 0 <= index < a.shape[1]:
        raise ShapeError(f"take_channel: index {index} invalid for shape {a.shape}")
    shape = a.shape

    def fn(x):
        return x[:, index:index + 1].copy()

    def vjp(g):
        full = np.zeros(shape)
        full[:, index:index + 1] = g
        return (full,)

    return _record("take_channel", (a,), fn(a.data), fn, vjp)


def forward_diff(a, axis):
    """``a[i+1] - a[i]`` along ``axis``; output is one shorter on that axis."""
    a = _lift(a)
    shape = a.shape
    n = shape[axis]
    if n < 2:
        raise ShapeError(f"forward_diff: axis {axis} of shape {shape} has length < 2")

    def fn(x):
        return np.diff(x, axis=axis)

    def vjp(g):
        full = np.zeros(shape)
        hi = [slice(None)] * len(shape)
        lo = [slice(None)] * len(shape)
        hi[axis] = slice(1, n)
        lo[axis] = slice(0, n - 1)
        full[tuple(hi)] += g
        full[tuple(lo)] -= g
        return (full,)

    return _record("forward_diff", (a,), fn(a.data), fn, vjp)


# --- channel softmax ---------------------------------------------------------

def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_along_channel(a):
    a = _lift(a)
    p = _softmax(a.data)
    return _record("softmax", (a,), p, _softmax,
                   lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def _log_softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_along_channel(a):
    a = _lift(a)
    y = _log_softmax(a.data)
    p = np.exp(y)
    return _record("log_softmax", (a,), y, _log_softmax,
                   lambda g: (g - p * g.sum(axis=1, keepdims=True),))


# --- spatial -----------------------------------------------------------------

def avg_pool3(a):
    """3x3x3 mean filter, stride 1, zero padding, over the last three axes."""
    a = _lift(a)
    if a.ndim < 3:
        raise ShapeError(f"avg_pool3: need at least 3 axes, got shape {a.shape}")
    # zero-padded box filter with a symmetric kernel is self-adjoint
    return _record("avg_pool3", (a,), _kernels.box_mean3(a.data), _kernels.box_mean3,
                   lambda g: (_kernels.box_mean3(g),))


def _conv_forward(x, w, b):
    B, Cin, X, Y, Z = x.shape
    Cout, _, k = w.shape[0], w.shape[1], w.shape[2]
    if k == 1:
        cols = np.ascontiguousarray(x.transpose(1, 0, 2, 3, 4)).reshape(Cin, -1)
    else:
        cols = _kernels.im2col3d(x, k)
    out = w.reshape(Cout, -1) @ cols
    if b is not None:
        out += b[:, None]
    out = np.ascontiguousarray(out.reshape(Cout, B, X, Y, Z).transpose(1, 0, 2, 3, 4))
    return out, cols


def conv3d(x, w, b=None):
    """Stride-1 'same' 3-D convolution (cross-correlation), zero padded.

    ``x``: (B, Cin, X, Y, Z); ``w``: (Cout, Cin, k, k, k) with odd ``k``;
    ``b``: (Cout,) or None.
    """
    x, w = _lift(x), _lift(w)
    if x.ndim != 5:
        raise ShapeError(f"conv3d: input must be (B, C, X, Y, Z), got {x.shape}")
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv3d: weight must be (Cout, Cin, k, k, k) with odd k, got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} has {x.shape[1]} channels, weight {w.shape} expects {w.shape[1]}")
    inputs = (x, w)
    if b is not None:
        b = _lift(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv3d: bias {b.shape} does not match weight {w.shape}")
        inputs = (x, w, b)
    xd, wd = x.data, w.data
    out, cols = _conv_forward(xd, wd, None if b is None else b.data)
    k = wd.shape[2]
    Cout = wd.shape[0]
    xshape = xd.shape

    def fn(xa, wa, ba=None):
        return _conv_forward(xa, wa, ba)[0]

    def vjp(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4)).reshape(Cout, -1)
        gw = (gm @ cols.T).reshape(wd.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = wd.reshape(Cout, -1).T @ gm
            if k == 1:
                gx = np.ascontiguousarray(
                    dcols.reshape((xshape[1], xshape[0]) + xshape[2:]).transpose(1, 0, 2, 3, 4))
            else:
                gx = _kernels.col2im3d(dcols, xshape, k)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    return _record("conv3d", inputs, out, fn, vjp)


# --- reverse pass ------------------------------------------------------------

def backward(tape: Tape, output: Tensor):
    """Gradients of a scalar ``output`` for every registered parameter.

    Parameters not reachable from ``output`` get exact zeros.
    """
    if output.data.size != 1:
        raise GradientError(f"backward needs a scalar output, got shape {output.shape}")
    grads = {}
    if output.requires_grad:
        if output.tape is not tape:
            raise GradientError("output was recorded on a different tape")
        grads[id(output)] = np.ones_like(output.data)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {name: grads.get(id(t), np.zeros_like(t.data)) for name, t in tape.params.items()}


# --- finite-difference oracle -----------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict
    tol: float

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error <= self.tol


def grad_check(f, params, step=1e-5, tol=1e-4, grad_fn=None):
    """Compare reverse-mode gradients against central finite differences.

    ``f(tape, tensors)`` builds a scalar loss from a dict of parameter tensors.
    For each parameter the error is ``max|g_ad - g_fd| / (max|g_ad| +
    max|g_fd| + 1e-12)``. ``grad_fn`` overrides the analytic gradient (used by
    negative-control tests).
    """
    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    def value(vals):
        tape = Tape()
        ts = {k: Tensor(v) for k, v in vals.items()}
        return float(f(tape, ts).data)

    base = value(params)
    if value(params) != base:
        raise GradientError("function is not deterministic: two evaluations disagree")
    if grad_fn is None:
        tape = Tape()
        ts = {k: tape.parameter(k, v) for k, v in params.items()}
        analytic = backward(tape, f(tape, ts))
    else:
        analytic = grad_fn(params)
    errors = {}
    for name, arr in params.items():
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = value(params)
            flat[i] = orig - step
            lo = value(params)
            flat[i] = orig
            fd.reshape(-1)[i] = (hi - lo) / (2 * step)
        ga = np.asarray(analytic[name])
        num = np.max(np.abs(ga - fd)) if fd.size else 0.0
        den = np.max(np.abs(ga)) + np.max(np.abs(fd)) + 1e-12 if fd.size else 1.0
        errors[name] = float(num / den)
    return GradCheckReport(errors, tol)


# --- optimiser ---------------------------------------------------------------

class Adam:
    """Adam over a dict of named arrays; updates happen in sorted-name order."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(self.params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            self.params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
