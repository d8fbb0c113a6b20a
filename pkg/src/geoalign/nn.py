"""Layers and optimizer built on the tensor engine.

Initialization convention: weights drawn from N(0, 1/fan_in), biases and the
output projections of attention / MLP sublayers zero-initialized so every
residual block starts as the identity.
"""

from __future__ import annotations

import math

import numpy as np

from . import _kernels
from . import tensor as T
from .errors import ConfigError
from .tensor import Parameter, Tensor


def normal_weight(name: str, rng: np.random.Generator, n_in: int, n_out: int) -> Parameter:
    return Parameter(name, rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))


def zero_weight(name: str, n_in: int, n_out: int) -> Parameter:
    return Parameter(name, np.zeros((n_in, n_out)))


def zeros_param(name: str, n: int) -> Parameter:
    return Parameter(name, np.zeros(n))


def ones_param(name: str, n: int) -> Parameter:
    return Parameter(name, np.ones(n))


def linear(x: Tensor, w: Parameter, b: Parameter | None = None) -> Tensor:
    g = x.graph
    if b is None:
        return T.matmul(x, g.param(w))
    return T.affine(x, g.param(w), g.param(b))


def layer_norm(x: Tensor, gain: Parameter, bias: Parameter) -> Tensor:
    g = x.graph
    return T.layer_norm(x, g.param(gain), g.param(bias))


class AttentionBlock:
    """Pre-norm transformer block: LN -> multi-head attention -> residual,
    LN -> 2-layer GELU MLP (hidden 4x) -> residual.

    Shape-preserving on (..., T, D) token stacks; contains no positional
    encoding, so permuting input tokens permutes outputs identically.
    """

    def __init__(self, name: str, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ConfigError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        hidden = 4 * dim
        self.ln1_gain = ones_param(f"{name}/ln1_gain", dim)
        self.ln1_bias = zeros_param(f"{name}/ln1_bias", dim)
        self.wq = normal_weight(f"{name}/wq", rng, dim, dim)
        self.bq = zeros_param(f"{name}/bq", dim)
        self.wk = normal_weight(f"{name}/wk", rng, dim, dim)
        self.bk = zeros_param(f"{name}/bk", dim)
        self.wv = normal_weight(f"{name}/wv", rng, dim, dim)
        self.bv = zeros_param(f"{name}/bv", dim)
        self.wo = zero_weight(f"{name}/wo", dim, dim)
        self.bo = zeros_param(f"{name}/bo", dim)
        self.ln2_gain = ones_param(f"{name}/ln2_gain", dim)
        self.ln2_bias = zeros_param(f"{name}/ln2_bias", dim)
        self.w1 = normal_weight(f"{name}/w1", rng, dim, hidden)
        self.c1 = zeros_param(f"{name}/c1", hidden)
        self.w2 = zero_weight(f"{name}/w2", hidden, dim)
        self.c2 = zeros_param(f"{name}/c2", dim)

    def parameters(self) -> list[Parameter]:
        return [
            self.ln1_gain, self.ln1_bias,
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
            self.ln2_gain, self.ln2_bias,
            self.w1, self.c1, self.w2, self.c2,
        ]

    def _split_heads(self, t: Tensor) -> Tensor:
        # (..., T, D) -> (..., H, T, D/H)
        lead = t.data.shape[:-1]
        return T.swap_axes(T.reshape(t, lead + (self.heads, self.head_dim)), -3, -2)

    def __call__(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.ln1_gain, self.ln1_bias)
        q = self._split_heads(linear(h, self.wq, self.bq))
        k = self._split_heads(linear(h, self.wk, self.bk))
        v = self._split_heads(linear(h, self.wv, self.bv))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.head_dim))
        attn = T.matmul(T.softmax(scores), v)
        merged = T.reshape(T.swap_axes(attn, -3, -2), x.data.shape)
        x = T.add(x, linear(merged, self.wo, self.bo))
        h2 = layer_norm(x, self.ln2_gain, self.ln2_bias)
        f = linear(T.gelu(linear(h2, self.w1, self.c1)), self.w2, self.c2)
        return T.add(x, f)


class Adam:
    """Adam with bias correction; update order follows the parameter list."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            _kernels.adam_update(
                p.value.reshape(-1), p.grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                self.beta1, self.beta2, self.eps, bc1, bc2, self.lr,
            )
