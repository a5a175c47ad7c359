"""Parameterized layers: linear projection, layer norm, multi-head attention.

Layers are immutable during forward; parameter updates are exclusive to the
optimizer.  Weights initialize to Uniform(+-1/sqrt(fan_in)) from a seeded
generator keyed by the parameter's dotted path; biases start at zero.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .rng import rng_for
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    """y = x W^T + b over the last axis."""

    def __init__(self, in_dim: int, out_dim: int, *, seed: int = 0, path: str = "linear",
                 dtype=np.float32, zero_init: bool = False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            w = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            w = uniform_init(rng_for(seed, "init", path, "weight"), (out_dim, in_dim), in_dim, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise T.DimensionError(
                f"linear: input width {x.shape[-1]} != layer width {self.in_dim}"
            )
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.in_dim)) if x.ndim != 2 else x
        y = T.add_bias(T.matmul(flat, T.transpose(self.weight)), self.bias)
        return T.reshape(y, (*lead, self.out_dim)) if x.ndim != 2 else y

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class LayerNorm:
    """Learnable affine layer norm over the last axis (population variance)."""

    def __init__(self, dim: int, *, eps: float = 1e-5, dtype=np.float32):
        self.dim = dim
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class MultiHeadAttention:
    """Scaled dot-product attention, 1/sqrt(head_dim), no positional encoding."""

    def __init__(self, width: int, num_heads: int, *, seed: int = 0, path: str = "attn",
                 dtype=np.float32):
        if width % num_heads != 0:
            raise T.DimensionError(f"width {width} not divisible by {num_heads} heads")
        self.width = width
        self.num_heads = num_heads
        self.head_dim = width // num_heads
        self.wq = Linear(width, width, seed=seed, path=f"{path}.wq", dtype=dtype)
        self.wk = Linear(width, width, seed=seed, path=f"{path}.wk", dtype=dtype)
        self.wv = Linear(width, width, seed=seed, path=f"{path}.wv", dtype=dtype)
        self.wo = Linear(width, width, seed=seed, path=f"{path}.wo", dtype=dtype)

    def _heads(self, x: Tensor, batch: int, t: int) -> Tensor:
        # (batch, t, width) -> (batch*heads, t, head_dim)
        x = T.reshape(x, (batch, t, self.num_heads, self.head_dim))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (batch * self.num_heads, t, self.head_dim))

    def _unheads(self, x: Tensor, batch: int, t: int) -> Tensor:
        x = T.reshape(x, (batch, self.num_heads, t, self.head_dim))
        x = T.transpose(x, (0, 2, 1, 3))
        return T.reshape(x, (batch, t, self.width))

    def attend(self, queries: Tensor, keyvalues: Tensor) -> Tensor:
        """Batched attention on (batch, tokens, width) stacks."""
        if queries.shape[-1] != self.width or keyvalues.shape[-1] != self.width:
            raise T.DimensionError(
                f"attention width mismatch: {queries.shape} / {keyvalues.shape} vs {self.width}"
            )
        b, tq = queries.shape[0], queries.shape[1]
        tkv = keyvalues.shape[1]
        q = self._heads(self.wq(queries), b, tq)
        k = self._heads(self.wk(keyvalues), b, tkv)
        v = self._heads(self.wv(keyvalues), b, tkv)
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.head_dim))
        weights = T.softmax_rows(scores)
        mixed = T.attention_mix(weights, v)
        return self.wo(self._unheads(mixed, b, tq))

    def parameters(self):
        out = []
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.extend((f"{name}.{p}", t) for p, t in lin.parameters())
        return out


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1, *x.shape)), True
    return x, False


def mhsa(att: MultiHeadAttention, x: Tensor) -> Tensor:
    """Self-attention over a token matrix (t, C) or a stack (b, t, C)."""
    xb, squeezed = _as_batch(x)
    y = att.attend(xb, xb)
    return T.reshape(y, y.shape[1:]) if squeezed else y


def mhca(att: MultiHeadAttention, query_tokens: Tensor, context_tokens: Tensor) -> Tensor:
    """Cross-attention: queries from features, keys/values from context tokens."""
    qb, squeezed = _as_batch(query_tokens)
    cb, _ = _as_batch(context_tokens)
    if qb.shape[0] != cb.shape[0]:
        raise T.DimensionError(
            f"mhca: batch mismatch {qb.shape[0]} vs {cb.shape[0]}"
        )
    y = att.attend(qb, cb)
    return T.reshape(y, y.shape[1:]) if squeezed else y
