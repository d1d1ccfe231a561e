"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records every primitive applied during a forward pass as a
:class:`Node`.  ``Tape.backward`` walks the recorded nodes once, in reverse
insertion order, and accumulates gradients into the :class:`Parameter`
objects that were read during the pass.

Non-differentiable forward functions (the spike nonlinearity, the reset)
are expressed with :meth:`Tape.custom_grad`, which pairs an arbitrary
forward value with a registered backward function.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Parameter",
    "Node",
    "Tape",
    "register_grad_fn",
    "registered_grad_fns",
    "PRIMITIVES",
]


class Parameter:
    """A learnable array that outlives individual tapes.

    Gradients accumulate across ``backward`` calls until :meth:`zero_grad`.
    """

    def __init__(self, data, name="", requires_grad=True, dtype=np.float64):
        self.data = np.array(data, dtype=dtype)
        self.name = name
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        return self

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Node:
    __slots__ = ("id", "op", "inputs", "value", "grad", "ctx", "tape", "param", "requires_grad")
    # make ndarray <op> Node defer to the reflected Node operator
    __array_ufunc__ = None

    def __init__(self, tape, op, inputs, value, ctx, requires_grad, param=None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.op = op
        self.inputs = inputs
        self.value = value
        self.ctx = ctx
        self.grad = None
        self.param = param
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def input_ids(self):
        return [n.id for n in self.inputs]

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"

    # arithmetic sugar; python scalars and arrays become constants
    def _lift(self, other):
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("sub", [self._lift(other), self])

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.record("scalar_mul", [self], c=float(other))
        return self.tape.record("elementwise_mul", [self, self._lift(other)])

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.record("scalar_mul", [self], c=-1.0)

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, self._lift(other)])

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a python scalar is supported")
        return self.tape.record("scalar_mul", [self], c=1.0 / float(other))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- primitives -------------------------------------------------------------
# Each entry: forward(ctx, *values) -> value, backward(ctx, g, out, *values) -> grads


def _add_f(ctx, a, b):
    _check_broadcast("add", a, b)
    return a + b


def _sub_f(ctx, a, b):
    _check_broadcast("sub", a, b)
    return a - b


def _mul_f(ctx, a, b):
    _check_broadcast("elementwise_mul", a, b)
    return a * b


def _matmul_f(ctx, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _conv2d_f(ctx, x, w):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    s, p = ctx["stride"], ctx["padding"]
    if s not in (1, 2):
        raise ValueError("conv2d supports stride 1 or 2")
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    kh, kw = w.shape[2:]
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ctx["win"] = win
    ctx["padded_shape"] = xp.shape
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_b(ctx, g, out, x, w):
    s, p = ctx["stride"], ctx["padding"]
    win = ctx["win"]
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    ho, wo = g.shape[2:]
    kh, kw = w.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
    dxp = np.zeros(ctx["padded_shape"], dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
    return dx, dw


def _avgpool_f(ctx, x):
    k = ctx["kernel"]
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"avgpool2d: input {x.shape} smaller than kernel {k}")
    return x[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))


def _avgpool_b(ctx, g, out, x):
    k = ctx["kernel"]
    ho, wo = g.shape[2:]
    dx = np.zeros_like(x)
    up = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
    dx[:, :, :ho * k, :wo * k] = up
    return (dx,)


def _reduce_count(x, axis):
    if axis is None:
        return x.size
    axes = axis if isinstance(axis, tuple) else (axis,)
    return int(np.prod([x.shape[a] for a in axes]))


def _expand_like(g, x, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _mean_b(ctx, g, out, x):
    g = _expand_like(g, x, ctx.get("axis"), ctx.get("keepdims", False))
    return (g / _reduce_count(x, ctx.get("axis")),)


def _sum_b(ctx, g, out, x):
    return (np.array(_expand_like(g, x, ctx.get("axis"), ctx.get("keepdims", False))),)


def _stack_b(ctx, g, out, *xs):
    return tuple(g[i] for i in range(len(xs)))


def _index_b(ctx, g, out, x):
    dx = np.zeros_like(x)
    dx[ctx["index"]] = g
    return (dx,)


def _sigmoid_f(ctx, x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus_f(ctx, x):
    return np.logaddexp(0.0, x)


def _log_softmax_f(ctx, x):
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _log_softmax_b(ctx, g, out, x):
    return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)


def _bn_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _bn_param_shape(x):
    return (1, x.shape[1]) + (1,) * (x.ndim - 2)


def _batchnorm_f(ctx, x, gamma, beta):
    axes = _bn_axes(x)
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + ctx["eps"])
    xhat = (x - mean) * inv_std
    ctx.update(mean=mean.ravel(), var=var.ravel(), inv_std=inv_std, xhat=xhat,
               count=_reduce_count(x, axes))
    shape = _bn_param_shape(x)
    return gamma.reshape(shape) * xhat + beta.reshape(shape)


def _batchnorm_b(ctx, g, out, x, gamma, beta):
    axes = _bn_axes(x)
    xhat, inv_std, m = ctx["xhat"], ctx["inv_std"], ctx["count"]
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * gamma.reshape(_bn_param_shape(x))
    dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
    return dx, dgamma, dbeta


def _reshape_f(ctx, x):
    try:
        return x.reshape(ctx["shape"])
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {ctx['shape']}") from None


PRIMITIVES = {
    "add": (_add_f, lambda ctx, g, out, a, b: (g, g)),
    "sub": (_sub_f, lambda ctx, g, out, a, b: (g, -g)),
    "scalar_mul": (lambda ctx, a: a * ctx["c"], lambda ctx, g, out, a: (g * ctx["c"],)),
    "elementwise_mul": (_mul_f, lambda ctx, g, out, a, b: (g * b, g * a)),
    "matmul": (_matmul_f, lambda ctx, g, out, a, b: (g @ b.T, a.T @ g)),
    "conv2d": (_conv2d_f, _conv2d_b),
    "avgpool2d": (_avgpool_f, _avgpool_b),
    "relu": (lambda ctx, x: np.maximum(x, 0.0), lambda ctx, g, out, x: (g * (x > 0),)),
    "mean": (lambda ctx, x: np.asarray(x.mean(axis=ctx.get("axis"), keepdims=ctx.get("keepdims", False))),
             _mean_b),
    "sum": (lambda ctx, x: np.asarray(x.sum(axis=ctx.get("axis"), keepdims=ctx.get("keepdims", False))),
            _sum_b),
    "reshape": (_reshape_f, lambda ctx, g, out, x: (g.reshape(x.shape),)),
    "stack": (lambda ctx, *xs: np.stack(xs), _stack_b),
    "index": (lambda ctx, x: x[ctx["index"]], _index_b),
    "sigmoid": (_sigmoid_f, lambda ctx, g, out, x: (g * out * (1.0 - out),)),
    "softplus": (_softplus_f, lambda ctx, g, out, x: (g * _sigmoid_f(None, x),)),
    "log_softmax": (_log_softmax_f, _log_softmax_b),
    "batchnorm": (_batchnorm_f, _batchnorm_b),
}

_GRAD_FNS = {}


def register_grad_fn(grad_fn_id, fn):
    """Register ``fn(g, saved) -> tuple of input grads`` under ``grad_fn_id``."""
    _GRAD_FNS[grad_fn_id] = fn
    return fn


def registered_grad_fns():
    return sorted(_GRAD_FNS)


class Tape:
    """Append-only record of one forward pass."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self._params = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, node):
        self.nodes.append(node)
        return node

    def constant(self, value):
        value = np.asarray(value, dtype=self.dtype)
        return self._append(Node(self, "const", [], value, {}, False))

    def param(self, p):
        """Leaf node reading Parameter ``p``; one leaf per parameter per tape."""
        node = self._params.get(id(p))
        if node is None:
            value = p.data if p.data.dtype == self.dtype else p.data.astype(self.dtype)
            node = self._append(Node(self, "param", [], value, {}, p.requires_grad, param=p))
            self._params[id(p)] = node
        return node

    @property
    def parameters(self):
        return [n.param for n in self._params.values()]

    def _check_inputs(self, inputs):
        for n in inputs:
            if not isinstance(n, Node) or n.tape is not self:
                raise ValueError("inputs must be nodes recorded on this tape")

    def record(self, op_kind, inputs, **ctx):
        """Apply primitive ``op_kind`` to ``inputs`` and record the result."""
        try:
            forward, _ = PRIMITIVES[op_kind]
        except KeyError:
            raise ValueError(f"unknown primitive {op_kind!r}") from None
        self._check_inputs(inputs)
        value = forward(ctx, *(n.value for n in inputs))
        requires_grad = any(n.requires_grad for n in inputs)
        return self._append(Node(self, op_kind, list(inputs), value, ctx, requires_grad))

    def custom_grad(self, value, grad_fn_id, saved, inputs):
        """Emit ``value`` unchanged; backward dispatches to a registered function."""
        if grad_fn_id not in _GRAD_FNS:
            raise KeyError(f"unregistered grad_fn_id {grad_fn_id!r}")
        self._check_inputs(inputs)
        value = np.asarray(value, dtype=self.dtype)
        requires_grad = any(n.requires_grad for n in inputs)
        ctx = {"grad_fn_id": grad_fn_id, "saved": saved}
        return self._append(Node(self, "custom_grad", list(inputs), value, ctx, requires_grad))

    def release(self):
        """Drop recorded nodes and break node-tape reference cycles.

        Node values stay readable; the tape cannot be differentiated again.
        """
        for n in self.nodes:
            n.tape, n.inputs, n.grad = None, [], None
        self.nodes = []
        self._params = {}

    def backward(self, loss):
        """Accumulate d(loss)/d(param) into every parameter read on this tape.

        Returns a mapping from parameter name to its (accumulated) gradient.
        Parameters read on the tape but not reachable from ``loss`` keep their
        previous gradient, which is zero after ``zero_grad``.
        """
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[:loss.id + 1]):
            g = node.grad
            if g is None or not node.requires_grad:
                continue
            if node.param is not None:
                node.param.grad += g.astype(node.param.grad.dtype, copy=False)
                continue
            if node.op == "custom_grad":
                grads = _GRAD_FNS[node.ctx["grad_fn_id"]](g, node.ctx["saved"])
            else:
                grads = PRIMITIVES[node.op][1](node.ctx, g, node.value, *(n.value for n in node.inputs))
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                gi = _unbroadcast(np.asarray(gi), inp.value.shape)
                inp.grad = gi if inp.grad is None else inp.grad + gi
        return {n.param.name: n.param.grad for n in self._params.values()}


# --- convenience wrappers ---------------------------------------------------

def conv2d(x, w, stride=1, padding=0):
    return x.tape.record("conv2d", [x, w], stride=stride, padding=padding)


def avgpool2d(x, kernel=2):
    return x.tape.record("avgpool2d", [x], kernel=kernel)


def mean(x, axis=None, keepdims=False):
    return x.tape.record("mean", [x], axis=axis, keepdims=keepdims)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return x.tape.record("sum", [x], axis=axis, keepdims=keepdims)


def reshape(x, shape):
    return x.tape.record("reshape", [x], shape=tuple(shape))


def stack(xs):
    return xs[0].tape.record("stack", list(xs))


def index(x, i):
    return x.tape.record("index", [x], index=i)


def relu(x):
    return x.tape.record("relu", [x])


def sigmoid(x):
    return x.tape.record("sigmoid", [x])


def softplus(x):
    return x.tape.record("softplus", [x])


def log_softmax(x):
    return x.tape.record("log_softmax", [x])


def batchnorm(x, gamma, beta, eps=1e-5):
    return x.tape.record("batchnorm", [x, gamma, beta], eps=eps)
