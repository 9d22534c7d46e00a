"""Small parameter-module system on top of the autograd Tensor.

Every public Tensor attribute of a Module is a parameter (frozen teachers
keep requires_grad=False copies of the same names); derived caches live in
underscore attributes and are never collected.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError


class Module:
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        self._collect("", out)
        return out

    def _collect(self, prefix, out):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                value._collect(key + ".", out)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        item._collect(f"{key}.{i}.", out)
                    elif isinstance(item, Tensor):
                        out[f"{key}.{i}"] = item

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def freeze(self):
        for p in self.named_parameters().values():
            p.requires_grad = False


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, zero_init=False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = ag.xavier_uniform(rng, in_dim, out_dim)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = ag.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gain, self.shift, self.eps)


class Mlp(Module):
    """Stack of linear layers with ReLU between them (none after the last)."""

    def __init__(self, dims, rng, bias=True):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, bias=bias) for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i != last:
                x = ag.relu(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention over (seq, channels) inputs.

    head_dim defaults to model_dim // heads; the output projection maps the
    concatenated heads to out_dim.  The most recent attention map is kept on
    `last_attention` for inspection.
    """

    def __init__(self, model_dim, heads, rng, head_dim=None, out_dim=None,
                 bias=True, zero_out_proj=False):
        if head_dim is None:
            if model_dim % heads != 0:
                raise ShapeError(f"model_dim {model_dim} not divisible by {heads} heads")
            head_dim = model_dim // heads
        self.heads = heads
        self.head_dim = head_dim
        inner = heads * head_dim
        self.proj_q = Linear(model_dim, inner, rng, bias=bias)
        self.proj_k = Linear(model_dim, inner, rng, bias=bias)
        self.proj_v = Linear(model_dim, inner, rng, bias=bias)
        self.proj_out = Linear(inner, out_dim or model_dim, rng, bias=bias,
                               zero_init=zero_out_proj)
        self._last_attn = None

    @property
    def last_attention(self) -> Tensor | None:
        return self._last_attn

    def __call__(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        nq = query.data.shape[0]
        nk = key.data.shape[0]
        h, d = self.heads, self.head_dim
        q = ag.transpose(ag.reshape(self.proj_q(query), (nq, h, d)), (1, 0, 2))
        k = ag.transpose(ag.reshape(self.proj_k(key), (nk, h, d)), (1, 2, 0))
        v = ag.transpose(ag.reshape(self.proj_v(value), (nk, h, d)), (1, 0, 2))
        scores = ag.mul(ag.matmul(q, k), 1.0 / math.sqrt(d))
        attn = ag.softmax(scores, axis=-1)
        self._last_attn = attn
        mixed = ag.matmul(attn, v)
        merged = ag.reshape(ag.transpose(mixed, (1, 0, 2)), (nq, h * d))
        return self.proj_out(merged)
