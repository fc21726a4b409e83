"""A small reverse-mode differentiation engine over numpy arrays.

Two pieces work together:

* :class:`Tape` / :class:`Var` record elementary array operations and run a
  reverse sweep to get parameter gradients of a scalar loss.
* :class:`DualVector` carries a value together with its directional
  derivatives along the two input axes.  The tangent arithmetic is itself
  built from recorded ops, so an input-gradient computed this way is still
  differentiable with respect to the parameters.  This is what makes losses
  on input-gradients (self-calibration, DLSM, Jacobian penalty) trainable
  without nested reverse-over-reverse.

Everything is float64.  Broadcasting is limited to what an MLP over a batch
needs (bias rows, per-row scale columns).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericalOverflowError

__all__ = [
    "Tape",
    "Var",
    "DualVector",
    "param_gradient",
    "input_gradient",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "softplus",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "square",
    "reduce_sum",
    "reduce_mean",
    "logsumexp",
    "concat",
    "pick",
    "rows",
    "transpose",
    "expand",
]


class Var:
    """Array-valued node.  ``tape is None`` marks a constant."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100.0

    def __init__(self, value, tape=None, index=-1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def tracked(self):
        return self.tape is not None

    def __repr__(self):
        kind = f"node {self.index}" if self.tracked else "const"
        return f"Var({kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "args", "fwd", "vjp", "value")

    def __init__(self, op, args, fwd, vjp, value):
        self.op = op
        self.args = args
        self.fwd = fwd
        self.vjp = vjp
        self.value = value


class Tape:
    """Ordered record of operations.  Single use: one backward sweep."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def var(self, value, name="leaf"):
        value = np.array(value, dtype=np.float64)
        node = _Node(name, (), None, None, value)
        self.nodes.append(node)
        return Var(value, self, len(self.nodes) - 1)

    def _push(self, op, args, fwd, vjp, value):
        self.nodes.append(_Node(op, args, fwd, vjp, value))
        return Var(value, self, len(self.nodes) - 1)

    def replay(self):
        """Re-run every recorded op from the recorded leaves; returns values."""
        values = []
        for node in self.nodes:
            if node.fwd is None:
                values.append(node.value)
                continue
            vals = [values[a.index] if _is_tracked(a) else value_of(a) for a in node.args]
            values.append(node.fwd(*vals))
        return values

    def backward(self, out: Var):
        """Adjoints of ``out`` for every node, in a list indexed by node."""
        if self._consumed:
            raise RuntimeError("tape already used for a backward pass")
        if out.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if np.size(out.value) != 1:
            raise ValueError("backward needs a scalar output")
        self._consumed = True
        grads: list = [None] * len(self.nodes)
        grads[out.index] = np.ones_like(out.value)
        # creation order is a topological order
        for i in range(out.index, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            vals = [value_of(a) for a in node.args]
            parts = node.vjp(g, node.value, *vals)
            for a, ga in zip(node.args, parts):
                if not _is_tracked(a) or ga is None:
                    continue
                j = a.index
                grads[j] = ga if grads[j] is None else grads[j] + ga
        return grads


def _is_tracked(a):
    return isinstance(a, Var) and a.tape is not None


def value_of(a):
    return a.value if isinstance(a, Var) else a


def _apply(op, fwd, vjp, *args):
    tape = None
    for a in args:
        if _is_tracked(a):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    vals = [value_of(a) for a in args]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out = fwd(*vals)
    if not np.all(np.isfinite(out)):
        where = len(tape.nodes) if tape is not None else "untracked"
        raise NumericalOverflowError(f"non-finite value in '{op}' (node {where})",
                                     op=op, node=where)
    if tape is None:
        return Var(out)
    return tape._push(op, args, fwd, vjp, out)


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _shape(a):
    return np.shape(value_of(a))


# elementary ops ---------------------------------------------------------

def add(a, b):
    sa, sb = _shape(a), _shape(b)
    return _apply("add", np.add,
                  lambda g, out, x, y: (_unbroadcast(g, sa), _unbroadcast(g, sb)), a, b)


def sub(a, b):
    sa, sb = _shape(a), _shape(b)
    return _apply("sub", np.subtract,
                  lambda g, out, x, y: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), a, b)


def mul(a, b):
    sa, sb = _shape(a), _shape(b)
    return _apply("mul", np.multiply,
                  lambda g, out, x, y: (_unbroadcast(g * y, sa), _unbroadcast(g * x, sb)),
                  a, b)


def div(a, b):
    sa, sb = _shape(a), _shape(b)
    return _apply("div", np.divide,
                  lambda g, out, x, y: (_unbroadcast(g / y, sa),
                                        _unbroadcast(-g * out / y, sb)), a, b)


def neg(a):
    return _apply("neg", np.negative, lambda g, out, x: (-g,), a)


def _matmul_vjp(g, out, x, w):
    n, m = w.shape
    gx = g @ w.T
    gw = x.reshape(-1, n).T @ g.reshape(-1, m)
    return gx, gw


def matmul(a, w):
    """``a @ w`` with ``a`` of shape (..., n) and ``w`` a 2-D (n, m) array."""
    if len(_shape(w)) != 2:
        raise ValueError("matmul expects a 2-D right operand")
    return _apply("matmul", np.matmul, _matmul_vjp, a, w)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a):
    return _apply("softplus", lambda x: np.logaddexp(0.0, x),
                  lambda g, out, x: (g * _sigmoid(x),), a)


def sigmoid(a):
    return _apply("sigmoid", _sigmoid, lambda g, out, x: (g * out * (1.0 - out),), a)


def tanh(a):
    return _apply("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),), a)


def exp(a):
    return _apply("exp", np.exp, lambda g, out, x: (g * out,), a)


def log(a):
    return _apply("log", np.log, lambda g, out, x: (g / x,), a)


def square(a):
    return _apply("square", np.square, lambda g, out, x: (2.0 * g * x,), a)


def _restore(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape).copy()


def reduce_sum(a, axis=None, keepdims=False):
    shape = _shape(a)
    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims),
                  lambda g, out, x: (_restore(g, shape, axis, keepdims),), a)


def reduce_mean(a, axis=None, keepdims=False):
    shape = _shape(a)
    count = np.prod(shape) if axis is None else np.prod(
        [shape[i] for i in np.atleast_1d(axis)])
    return _apply("mean", lambda x: np.mean(x, axis=axis, keepdims=keepdims),
                  lambda g, out, x: (_restore(g, shape, axis, keepdims) / count,), a)


def _lse(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def logsumexp(a, axis=-1):
    """Shifted log-sum-exp along one axis (axis removed)."""
    def vjp(g, out, x):
        p = np.exp(x - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * p,)
    return _apply("logsumexp", lambda x: _lse(x, axis), vjp, a)


def concat(parts, axis=-1):
    sizes = [_shape(p)[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _apply("concat", lambda *xs: np.concatenate(xs, axis=axis),
                  lambda g, out, *xs: tuple(np.split(g, cuts, axis=axis)), *parts)


def _pick_index(x, idx):
    idx = np.broadcast_to(np.asarray(idx)[..., None], x.shape[:-1] + (1,))
    return idx


def pick(a, idx):
    """Select one entry along the last axis per row: ``a[..., i, idx[i]]``."""
    idx = np.asarray(idx, dtype=np.intp)

    def fwd(x):
        return np.take_along_axis(x, _pick_index(x, idx), axis=-1)[..., 0]

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, _pick_index(x, idx), g[..., None], axis=-1)
        return (gx,)
    return _apply("pick", fwd, vjp, a)


def rows(table, idx):
    """Row lookup ``table[idx]`` (embedding tables)."""
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g, out, x):
        gx = np.zeros_like(x)
        np.add.at(gx, idx, g)
        return (gx,)
    return _apply("rows", lambda x: x[idx], vjp, table)


def transpose(a, axes):
    inv = np.argsort(axes)
    return _apply("transpose", lambda x: np.transpose(x, axes),
                  lambda g, out, x: (np.transpose(g, inv),), a)


def expand(a, axis):
    return _apply("expand", lambda x: np.expand_dims(x, axis),
                  lambda g, out, x: (np.squeeze(g, axis),), a)


# forward tangents ---------------------------------------------------------

class DualVector:
    """Value with directional derivatives along the two input axes.

    ``value`` has shape (B, ...); ``tangents`` has shape (2, B, ...) with
    ``tangents[k]`` the derivative along input axis k.  ``tangents=None``
    means the quantity is constant in the input (zero tangents).
    """

    __slots__ = ("value", "tangents")

    def __init__(self, value, tangents=None):
        self.value = value
        self.tangents = tangents

    @classmethod
    def seed(cls, x):
        """Input points (B, 2) with identity tangents."""
        x = np.asarray(value_of(x), dtype=np.float64)
        eye = np.zeros((2,) + x.shape)
        eye[0, ..., 0] = 1.0
        eye[1, ..., 1] = 1.0
        return cls(x, eye)

    @classmethod
    def constant(cls, value):
        return cls(value, None)

    @property
    def is_constant(self):
        return self.tangents is None

    def tangent_array(self):
        if self.tangents is None:
            return np.zeros((2,) + _shape(self.value))
        return value_of(self.tangents)

    def __add__(self, other):
        if not isinstance(other, DualVector):
            return DualVector(add(self.value, other), self.tangents)
        if self.tangents is None:
            tan = other.tangents
        elif other.tangents is None:
            tan = self.tangents
        else:
            tan = add(self.tangents, other.tangents)
        return DualVector(add(self.value, other.value), tan)

    __radd__ = __add__

    def __mul__(self, c):
        """Scale by something constant in the input (scalar or (B, 1) column)."""
        if isinstance(c, DualVector):
            raise TypeError("product of two dual vectors is not supported")
        tan = None if self.tangents is None else mul(self.tangents, c)
        return DualVector(mul(self.value, c), tan)

    __rmul__ = __mul__

    def __sub__(self, other):
        return self + (-1.0) * other

    def affine(self, w, b=None):
        val = matmul(self.value, w)
        if b is not None:
            val = add(val, b)
        tan = None if self.tangents is None else matmul(self.tangents, w)
        return DualVector(val, tan)

    def softplus(self):
        val = softplus(self.value)
        if self.tangents is None:
            return DualVector(val)
        return DualVector(val, mul(sigmoid(self.value), self.tangents))

    def tanh(self):
        val = tanh(self.value)
        if self.tangents is None:
            return DualVector(val)
        return DualVector(val, mul(sub(1.0, square(val)), self.tangents))

    def logsumexp(self):
        """Log-sum-exp over the last axis; tangents are softmax-weighted."""
        val = logsumexp(self.value, axis=-1)
        if self.tangents is None:
            return DualVector(val)
        p = exp(sub(self.value, expand(val, -1)))
        return DualVector(val, reduce_sum(mul(p, self.tangents), axis=-1))

    def pick(self, idx):
        val = pick(self.value, idx)
        if self.tangents is None:
            return DualVector(val)
        return DualVector(val, pick(self.tangents, idx))

    def gradient(self):
        """Input-gradient of a per-row scalar: shape (B, 2)."""
        if self.tangents is None:
            return Var(np.zeros(_shape(self.value) + (2,)))
        return transpose(self.tangents, (1, 0))

    def jacobian(self):
        """Per-row Jacobian of a vector output: shape (B, m, 2)."""
        if self.tangents is None:
            return Var(np.zeros(_shape(self.value) + (2,)))
        return transpose(self.tangents, (1, 2, 0))


# front-end ----------------------------------------------------------------

def param_gradient(loss, params):
    """Value and gradient of a scalar loss.

    ``params`` is a dict of arrays (or a single array); ``loss`` receives the
    same structure with each array wrapped as a tracked :class:`Var` and must
    return a scalar ``Var``.
    """
    tape = Tape()
    if isinstance(params, dict):
        wrapped = {k: tape.var(v, name=k) for k, v in params.items()}
    else:
        wrapped = tape.var(params)
    out = loss(wrapped)
    if not _is_tracked(out):
        # loss does not depend on the parameters at all
        val = float(np.asarray(value_of(out)))
        if isinstance(params, dict):
            return val, {k: np.zeros_like(np.asarray(v, dtype=np.float64))
                         for k, v in params.items()}
        return val, np.zeros_like(np.asarray(params, dtype=np.float64))
    grads = tape.backward(out)

    def grad_of(v):
        g = grads[v.index]
        return np.zeros_like(v.value) if g is None else g

    if isinstance(wrapped, dict):
        return float(out.value), {k: grad_of(v) for k, v in wrapped.items()}
    return float(out.value), grad_of(wrapped)


def input_gradient(net, x):
    """∇_x of a vector-to-scalar ``net`` at point(s) ``x``.

    ``net`` maps a :class:`DualVector` of points (B, 2) to a per-row scalar
    :class:`DualVector`.  A single point of shape (2,) returns shape (2,).
    The result is a :class:`Var`; if ``net`` closed over tracked parameters
    it stays differentiable with respect to them.
    """
    x = np.asarray(value_of(x), dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    out = net(DualVector.seed(pts))
    g = out.gradient()
    if single:
        return _row0(g)
    return g


def _row0(g):
    return _apply("row0", lambda x: x[0], lambda gr, out, x: (_pad_row0(gr, x.shape),), g)


def _pad_row0(gr, shape):
    full = np.zeros(shape)
    full[0] = gr
    return full
