"""Trainable building blocks shared by the codec, condition encoder and denoiser.

Each layer registers its arrays in a :class:`ParamStore` under a path prefix
and keeps references to them, so loading a checkpoint into the store updates
the layer in place.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import ParamStore, Tensor


def sinusoidal_table(positions, dim: int) -> np.ndarray:
    """Fixed sin/cos encoding, one row per position (transformer convention)."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = pos * freqs[None, :]
    table = np.zeros((pos.shape[0], dim))
    table[:, 0:2 * half:2] = np.sin(ang)
    table[:, 1:2 * half:2] = np.cos(ang)
    return table


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    def __init__(self, store: ParamStore, path: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True, zero: bool = False,
                 init_std: float | None = None):
        if zero:
            w = np.zeros((d_in, d_out))
        elif init_std is not None:
            w = init_std * rng.standard_normal((d_in, d_out))
        else:
            w = _glorot(rng, d_in, d_out, (d_in, d_out))
        self.w = store.add(f"{path}/w", w)
        self.b = store.add(f"{path}/b", np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"Linear expects width {self.d_in}, got {x.shape[-1]}")
        y = nx.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, store: ParamStore, path: str, dim: int):
        self.gain = store.add(f"{path}/gain", np.ones(dim))
        self.shift = store.add(f"{path}/shift", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain, self.shift)


class BatchNorm:
    """Batch norm over every axis but the last (features)."""

    def __init__(self, store: ParamStore, path: str, dim: int):
        self.gain = store.add(f"{path}/gain", np.ones(dim))
        self.shift = store.add(f"{path}/shift", np.zeros(dim))
        self.stats = store.add_stats(path, dim)
        self.dim = dim

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        shape = x.shape
        flat = nx.reshape(x, (-1, self.dim))
        return nx.reshape(nx.batch_norm(flat, self.gain, self.shift, self.stats, training), shape)


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    y = nx.reshape(x, (*lead, n, heads, d // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return nx.transpose(y, axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return nx.reshape(nx.transpose(x, axes), (*lead, n, h * dh))


class SelfAttention:
    """Multi-head self-attention with an output projection."""

    def __init__(self, store: ParamStore, path: str, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)
        self.q = Linear(store, f"{path}/q", dim, dim, rng)
        self.k = Linear(store, f"{path}/k", dim, dim, rng)
        self.v = Linear(store, f"{path}/v", dim, dim, rng)
        self.out = Linear(store, f"{path}/out", dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.heads
        att = nx.attention(split_heads(self.q(x), h), split_heads(self.k(x), h),
                           split_heads(self.v(x), h), self.scale)
        return self.out(merge_heads(att))


class FeedForward:
    def __init__(self, store: ParamStore, path: str, dim: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(store, f"{path}/up", dim, hidden, rng)
        self.down = Linear(store, f"{path}/down", hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(nx.gelu(self.up(x)))


class TransformerBlock:
    """Pre-norm block: ``x + MSA(LN x)`` then ``x + FFN(LN x)``."""

    def __init__(self, store: ParamStore, path: str, dim: int, heads: int,
                 rng: np.random.Generator, ffn_mult: int = 4):
        self.ln1 = LayerNorm(store, f"{path}/ln1", dim)
        self.attn = SelfAttention(store, f"{path}/attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, f"{path}/ln2", dim)
        self.ffn = FeedForward(store, f"{path}/ffn", dim, ffn_mult * dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))
