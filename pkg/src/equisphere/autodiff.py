"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tape`` records primitive ops while active (it is a context manager and
a thread-local stack, so nested tapes are possible but rarely useful).  An op
is recorded only when a tape is active and at least one input requires
gradients; recorded outputs require gradients themselves so chains propagate.
``backward(loss)`` walks the tape in reverse recording order, which is a
reverse topological order by construction, accumulating into ``Tensor.grad``.
A tape can be backpropagated once; re-run the forward pass to differentiate
again.

Only the primitives needed by the models are provided: matmul, two-operand
einsum, elementwise arithmetic with broadcasting, leaky_relu/relu, softmax,
mean/sum reductions, linear, batch_norm, mse, reshape, concat, and basic
slicing.  Everything is deterministic given inputs.
"""

from __future__ import annotations

import threading

import numpy as np

_STACK = threading.local()


def _tapes() -> list:
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


def active_tape():
    tapes = _tapes()
    return tapes[-1] if tapes else None


class Tape:
    """Ordered op record; enter to start recording, call backward once."""

    def __init__(self):
        self._nodes = []
        self._used = False

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tapes().pop()
        assert popped is self
        return False

    def _record(self, node):
        self._nodes.append(node)

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: "Tensor"):
        if self._used:
            raise RuntimeError("tape already backpropagated; re-record the forward pass")
        if loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            out_grad = node.out.grad
            if out_grad is None:
                continue
            for inp, g in zip(node.inputs, node.bwd(out_grad)):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.asarray(g, dtype=np.float64)
                else:
                    inp.grad = inp.grad + g
        self._nodes.clear()


class _Node:
    __slots__ = ("inputs", "out", "bwd")

    def __init__(self, inputs, out, bwd):
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


class Tensor:
    """Float64 array with optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __getitem__(self, key):
        return _slice(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data, inputs, bwd) -> Tensor:
    """Create an op output, recording on the active tape when appropriate."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._record(_Node(inputs, out, bwd))
    return out


def backward(loss: Tensor):
    """Backpropagate from a scalar loss through the tape that recorded it."""
    if loss._tape is None:
        raise RuntimeError("loss was not recorded on a tape")
    loss._tape.backward(loss)


def make_op(out_data, inputs, bwd) -> Tensor:
    """Record a custom fused op.

    ``bwd`` maps the output gradient to a tuple of input gradients aligned
    with ``inputs`` (None entries allowed).  Use for domain ops whose naive
    composition from primitives would be wasteful; the fused op must agree
    with the primitive composition it replaces.
    """
    return _make(out_data, tuple(inputs), bwd)


def _sum_to(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_sum_to(g, a.shape), _sum_to(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bwd(g):
        ga = _sum_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _sum_to(g * a.data, b.shape) if b.requires_grad else None
        return (ga, gb)

    return _make(a.data * b.data, (a, b), bwd)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, slope * x.data)

    def bwd(g):
        factor = np.where(x.data > 0, 1.0, slope)
        return (g * factor,)

    return _make(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (x,), bwd)


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise ValueError("matmul supports (..., K) x (K, N) with 2-D right operand")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, b.data.T) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = np.matmul(a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
        return (ga, gb)

    return _make(out, (a, b), bwd)


def _parse_einsum(subscripts: str):
    if "..." in subscripts or "->" not in subscripts:
        raise ValueError("einsum requires explicit two-operand 'ab,bc->ac' form")
    lhs, out_spec = subscripts.split("->")
    specs = lhs.split(",")
    if len(specs) != 2:
        raise ValueError("einsum supports exactly two operands")
    a_spec, b_spec = specs
    for spec in (a_spec, b_spec, out_spec):
        if len(set(spec)) != len(spec):
            raise ValueError("repeated index labels within one operand are unsupported")
    for spec, other in ((a_spec, b_spec), (b_spec, a_spec)):
        for ch in spec:
            if ch not in other and ch not in out_spec:
                raise ValueError(f"index {ch!r} appears in one operand only and not "
                                 "in the output; its gradient is unsupported")
    return a_spec, b_spec, out_spec


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    a_spec, b_spec, out_spec = _parse_einsum(subscripts)
    out = np.einsum(subscripts, a.data, b.data, optimize=True)

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data, optimize=True)
        if b.requires_grad:
            gb = np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, a.data, optimize=True)
        return (ga, gb)

    return _make(out, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias with x (..., F_in), weight (F_out, F_in)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    out = np.matmul(x.data, weight.data.T) + bias.data

    def bwd(g):
        gx = np.matmul(g, weight.data) if x.requires_grad else None
        gw = gb = None
        g2 = g.reshape(-1, g.shape[-1])
        if weight.requires_grad:
            gw = g2.T @ x.data.reshape(-1, x.shape[-1])
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb)

    return _make(out, (x, weight, bias), bwd)


# ---------------------------------------------------------------------------
# reductions and losses


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.shape[axis]

    def bwd(g):
        g = np.asarray(g) / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(out, (x,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference; scalar output."""
    a, b = _as_tensor(a), _as_tensor(b)
    diff = a.data - b.data
    out = np.mean(diff * diff)

    def bwd(g):
        scale = 2.0 * g / diff.size
        ga = scale * diff if a.requires_grad else None
        gb = _sum_to(-scale * diff, b.shape) if b.requires_grad else None
        return (ga, gb)

    return _make(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), bwd)


def _slice(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, width: int):
        self.mean = np.zeros(width)
        self.var = np.ones(width)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.mean.shape[0])
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over the leading axis of a 2-D input.

    In training mode normalizes with biased batch statistics and updates the
    running statistics in place (unbiased variance, convex update with
    ``momentum`` weight on the new value).  In eval mode normalizes with the
    stored running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 2:
        raise ValueError("batch_norm expects a (batch, features) input")
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm training mode needs batch size >= 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        n = x.shape[0]
        state.mean = (1.0 - momentum) * state.mean + momentum * mu
        state.var = (1.0 - momentum) * state.var + momentum * var * n / (n - 1)
    else:
        mu = state.mean
        var = state.var
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * ivar
    out = gamma.data * xhat + beta.data

    def bwd(g):
        gg = (g * xhat).sum(axis=0) if gamma.requires_grad else None
        gb = g.sum(axis=0) if beta.requires_grad else None
        if not x.requires_grad:
            return (None, gg, gb)
        if training:
            n = x.shape[0]
            dxhat = g * gamma.data
            gx = (ivar / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            gx = g * gamma.data * ivar
        return (gx, gg, gb)

    return _make(out, (x, gamma, beta), bwd)
