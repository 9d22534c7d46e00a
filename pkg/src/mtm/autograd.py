"""Reverse-mode autodiff on dense float64 arrays.

A `Tensor` wraps a numpy array plus an optional tape node (parents and a
backward callable).  The tape is rebuilt on every forward pass, which keeps
per-step random masking trivial; `backward` walks it once in reverse
topological order.  Gradients accumulate with += semantics until cleared.

Everything is float64.  There is no broadcasting cleverness beyond what the
ops here need: elementwise ops broadcast like numpy and sum the gradient back
over broadcast axes.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .backend import kernels
from .errors import ContractError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction (inference / oracle evaluations)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._bwd = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar; scalars are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _node(data, parents, bwd):
    """Wrap an op result; drops the tape when grads are off or unneeded."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_val = float(b)
        return _node(a.data + b_val, (a,), lambda g: (g,))
    data = a.data + b.data
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b_val = float(b)
        return _node(a.data * b_val, (a,), lambda g: (g * b_val,))
    data = a.data * b.data
    return _node(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(data, (a, b), bwd)


def absolute(a: Tensor) -> Tensor:
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data >= b.data
    data = np.where(mask, a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), a.data.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.data.shape),
        )

    return _node(data, (a, b), bwd)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data <= b.data
    data = np.where(mask, a.data, b.data)

    def bwd(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), a.data.shape),
            _unbroadcast(np.where(mask, 0.0, g), b.data.shape),
        )

    return _node(data, (a, b), bwd)


def relu(a: Tensor) -> Tensor:
    x = a.data
    return _node(kernels.relu_fwd(x), (a,), lambda g: (kernels.relu_bwd(x, g),))


def sigmoid(a: Tensor) -> Tensor:
    out = kernels.sigmoid_fwd(a.data)
    return _node(out, (a,), lambda g: (kernels.sigmoid_bwd(out, g),))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _node(data, (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def narrow(a: Tensor, idx) -> Tensor:
    """Basic slicing / integer indexing; gradient scatters back."""
    data = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        return (buf,)

    return _node(data, (a,), bwd)


def gather_rows(a: Tensor, rows) -> Tensor:
    """Select rows by an integer array (rows may repeat)."""
    rows = np.asarray(rows, dtype=np.intp)
    data = a.data[rows]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, rows, g)
        return (buf,)

    return _node(data, (a,), bwd)


def concat(parts, axis=0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    ref = list(parts[0].data.shape)
    for p in parts[1:]:
        other = list(p.data.shape)
        if len(other) != len(ref) or any(
            o != r for i, (o, r) in enumerate(zip(other, ref)) if i != axis
        ):
            raise ShapeError(
                f"concat shapes incompatible along axis {axis}: "
                f"{[tuple(q.data.shape) for q in parts]}"
            )
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _node(data, tuple(parts), bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return _node(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# fused ops
# ---------------------------------------------------------------------------


def _rows_view(data, axis):
    """Move `axis` last and flatten to 2-d rows; returns (rows, restore)."""
    moved = np.moveaxis(data, axis, -1)
    shape = moved.shape
    rows = np.ascontiguousarray(moved.reshape(-1, shape[-1]))

    def restore(arr2d):
        return np.moveaxis(arr2d.reshape(shape), -1, axis)

    return rows, restore


def softmax(a: Tensor, axis=-1) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericError("softmax input contains non-finite values")
    axis = axis % a.data.ndim
    rows, restore = _rows_view(a.data, axis)
    out_rows = kernels.softmax_fwd(rows)
    out = restore(out_rows)

    def bwd(g):
        g_rows = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(rows.shape))
        return (restore(kernels.softmax_bwd(out_rows, g_rows)),)

    return _node(out, (a,), bwd)


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    if not np.isfinite(a.data).all():
        raise NumericError("log_softmax input contains non-finite values")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def bwd(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    n = a.data.shape[-1] if a.data.ndim else 0
    if n == 0:
        raise ShapeError("layer_norm over a zero-length last axis")
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature width {n}"
        )
    lead = a.data.shape[:-1]
    rows = np.ascontiguousarray(a.data.reshape(-1, n))
    out_rows, xhat, rstd = kernels.layernorm_fwd(rows, gain.data, bias.data, eps)

    def bwd(g):
        g_rows = np.ascontiguousarray(g.reshape(-1, n))
        dx, dgain, dbias = kernels.layernorm_bwd(g_rows, xhat, rstd, gain.data)
        return dx.reshape(a.data.shape), dgain, dbias

    return _node(out_rows.reshape(lead + (n,)), (a, gain, bias), bwd)


def bce_with_logits(logit: Tensor, label: float) -> Tensor:
    """Mean binary cross-entropy against a constant 0/1 domain label.

    Evaluated in the log-sum-exp form, so extreme logits stay finite.
    """
    if label not in (0.0, 1.0, 0, 1):
        raise ContractError(f"domain label must be 0 or 1, got {label}")
    label = float(label)
    flat = np.ascontiguousarray(logit.data.reshape(-1))
    loss = kernels.bce_logits_fwd(flat, label)

    def bwd(g):
        d = kernels.bce_logits_bwd(flat, label, float(g))
        return (d.reshape(logit.data.shape),)

    return _node(np.float64(loss), (logit,), bwd)


def grad_reverse(a: Tensor, coefficient: float) -> Tensor:
    """Identity forward; backward scales the incoming gradient by -coefficient."""
    if coefficient < 0:
        raise ContractError(f"grad_reverse coefficient must be >= 0, got {coefficient}")
    return _node(a.data, (a,), lambda g: (g * (-coefficient),))


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------


def backward(loss: Tensor):
    """Accumulate d(loss)/dx into .grad for every requires_grad tensor."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flowing = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flowing.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._bwd is None:
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flowing:
                flowing[key] = flowing[key] + pg
            else:
                flowing[key] = pg


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected adaptive-moment descent over a fixed parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(f"parameter {i} has no gradient")
        self.step_count += 1
        for p, m, v in zip(self.params, self.m, self.v):
            kernels.adam_update(
                p.data, p.grad, m, v, self.lr, self.beta1, self.beta2, self.eps,
                self.step_count,
            )
            p.grad = None


def adam_step(opt: Adam, params=None):
    """Apply one optimizer step (thin wrapper around Adam.step)."""
    if params is not None and list(params) != opt.params:
        raise ContractError("optimizer was built over a different parameter list")
    opt.step()


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)
