"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a NumPy array. Every differentiable operation returns a
new tensor that remembers its parents and a closure mapping the output adjoint
to parent adjoints. :meth:`Tensor.backward` walks that graph in reverse
topological order. Only leaf tensors (those created directly with
``requires_grad=True``) have their ``grad`` buffers accumulated; intermediate
adjoints live in a scratch dict for the duration of one backward pass.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import kernels

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "softmax_lastdim",
    "gelu",
    "layernorm",
    "stack",
    "concat",
    "cross_entropy",
    "Adam",
    "adam_step",
]

DEFAULT_DTYPE = np.float64
LAYERNORM_EPS = 1e-6
# tanh-form GeLU everywhere; see kernels.GELU_C
GELU_FORM = "tanh"

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _as_array(value, dtype=None):
    if isinstance(value, Tensor):
        return value.data
    arr = np.asarray(value, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype) if dtype is not None else _as_array(data)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        """Wrap an op result, recording it on the tape when any parent is tracked."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    # -- reverse pass -----------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        adjoints = {id(self): grad}
        for node in reversed(order):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + pg
                else:
                    adjoints[key] = pg

    # -- arithmetic -------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return self * (1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def abs(self):
        a = self.data
        return Tensor._from_op(np.abs(a), (self,), lambda g: (g * np.sign(a),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,))

    # -- shape manipulation -----------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return self.transpose(tuple(axes))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, idx):
        src_shape, dtype = self.shape, self.dtype

        def back(g):
            full = np.zeros(src_shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._from_op(self.data[idx], (self,), back)

    # -- reductions -------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        src = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src).copy(),)

        return Tensor._from_op(np.asarray(out), (self,), back)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def max(self, axis, keepdims=False):
        a = self.data
        idx = np.argmax(a, axis=axis)
        out = np.take_along_axis(a, np.expand_dims(idx, axis), axis=axis)

        def back(g):
            full = np.zeros_like(a)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
            return (full,)

        return Tensor._from_op(out if keepdims else np.squeeze(out, axis), (self,), back)


def _check_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")


def matmul(a, b):
    """Matrix product over the last two axes, broadcasting leading axes."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    _check_matmul(a, b)
    A, B = a.data, b.data
    if B.ndim == 2 and A.ndim > 2:
        # fold leading axes so BLAS sees one large GEMM
        lead = A.shape[:-1]
        out = (A.reshape(-1, A.shape[-1]) @ B).reshape(lead + (B.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ B.T).reshape(A.shape) if a.requires_grad else None
            gb = A.reshape(-1, A.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb

        return Tensor._from_op(out, (a, b), back)

    out = A @ B

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), back)


def softmax_lastdim(t):
    """Max-stabilised softmax over the last axis."""
    if t.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    y = kernels.softmax_forward(t.data)
    return Tensor._from_op(y, (t,), lambda g: (kernels.softmax_backward(y, g),))


def gelu(t):
    """Tanh-approximation GeLU."""
    x = t.data
    return Tensor._from_op(kernels.gelu_forward(x), (t,), lambda g: (kernels.gelu_backward(x, g),))


def layernorm(t, gain, bias, eps=LAYERNORM_EPS):
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    y, xhat, rstd = kernels.layernorm_forward(t.data, gain.data, bias.data, eps)
    shape = t.shape

    def back(g):
        gx, ggain, gbias = kernels.layernorm_backward(g, xhat, rstd, gain.data)
        return gx.reshape(shape), ggain.reshape(gain.shape), gbias.reshape(bias.shape)

    return Tensor._from_op(y, (t, gain, bias), back)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(out, tensors, back)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, back)


def cross_entropy(logits, targets):
    """Mean softmax cross-entropy of ``logits`` (N x C) against integer ``targets``."""
    z = logits.data
    targets = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] != targets.shape[0]:
        raise ShapeError(f"cross_entropy expects (N, C) logits and N targets, got {z.shape} and {targets.shape}")
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), targets].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=z.dtype), (logits,), back)


# -- optimisation -------------------------------------------------------------

class Adam:
    """Bias-corrected Adam with decoupled weight decay.

    ``state`` holds first/second moment buffers keyed like ``params`` plus the
    step counter ``t``.
    """

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {
            "t": 0,
            "m": {k: np.zeros_like(p.data) for k, p in self.params.items()},
            "v": {k: np.zeros_like(p.data) for k, p in self.params.items()},
        }

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2,
                  self.weight_decay, self.eps)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, weight_decay=0.0, eps=1e-8):
    """Apply one in-place Adam update to ``params`` and return ``state``.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` happens before the
    moment-based step.
    """
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m, v = state["m"][k], state["v"][k]
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeError(f"adam_step: {k!r} has param {p.data.shape}, grad {g.shape}, moment {m.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def finite_difference_grad(fn, param, step=1e-5, index=None):
    """Central differences of scalar ``fn()`` w.r.t. entries of ``param.data``.

    ``index`` restricts the entries checked (an iterable of flat indices).
    Returns a flat array aligned with ``index`` (or all entries).
    """
    flat = param.data.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = []
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            out.append((fp - fm) / (2.0 * step))
    return np.array(out)


def relative_error(analytic, numeric, floor=1e-12):
    """Max entrywise error scaled by the larger of the two vectors' magnitudes."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)

