"""Multi-scale Transformer denoiser: predicts the injected noise from (z_t, t, c)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .layers import BatchNorm, FeedForward, LayerNorm, Linear, SelfAttention, sinusoidal_table
from .numerics import ParamStore, Tensor
from .stc import COORD_SCALE


@dataclass
class MtdConfig:
    d_lat: int
    d_cond: int
    dim: int = 64
    heads: int = 16
    kernels: tuple[int, ...] = (3, 5, 7, 9)
    blocks: int = 2
    ffn_mult: int = 4
    input_skip: bool = True
    seed: int = 2

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        if not self.kernels:
            raise ConfigError("mtd.kernels must list at least one kernel size")
        if any(k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"mtd.kernels must be odd, got {self.kernels}")
        if self.dim % len(self.kernels):
            raise ConfigError(f"mtd.dim {self.dim} not divisible by {len(self.kernels)} scales")
        if self.dim % self.heads:
            raise ConfigError(f"mtd.dim {self.dim} not divisible by mtd.heads {self.heads}")

    @property
    def filters_per_scale(self) -> int:
        return self.dim // len(self.kernels)


@dataclass
class TokenLayout:
    """Where each latent token sits: its channel's 3D position and its window index."""
    coords: np.ndarray
    window: np.ndarray

    @classmethod
    def grid(cls, positions: np.ndarray, n_windows: int) -> "TokenLayout":
        positions = np.asarray(positions, dtype=np.float64)
        return cls(np.repeat(positions, n_windows, axis=0),
                   np.tile(np.arange(n_windows), positions.shape[0]))

    def __len__(self) -> int:
        return len(self.window)


class CrossAttention:
    """``softmax(LN(o Wq) LN(c Wk)^T / sqrt(d_k)) (c Wv)`` with one head of width ``d_k = dim``.

    Layer norm is applied to the projected query and key rows before the dot
    product. A single full-width head keeps the attention logits wide enough
    to pick out individual condition tokens; with 4-wide heads the normalised
    logits stay within a few units and attention is close to uniform.
    """

    def __init__(self, store: ParamStore, path: str, dim: int, d_cond: int, rng):
        self.scale = 1.0 / np.sqrt(dim)
        self.q = Linear(store, f"{path}/wq", dim, dim, rng, bias=False)
        self.k = Linear(store, f"{path}/wk", d_cond, dim, rng, bias=False)
        self.v = Linear(store, f"{path}/wv", d_cond, dim, rng, bias=False)
        self.ln_q = LayerNorm(store, f"{path}/ln_q", dim)
        self.ln_k = LayerNorm(store, f"{path}/ln_k", dim)
        self.d_cond = d_cond

    def __call__(self, o: Tensor, c: Tensor) -> Tensor:
        if c.shape[-1] != self.d_cond:
            raise DimensionError(f"condition width {c.shape[-1]} != {self.d_cond}")
        return nx.attention(self.ln_q(self.q(o)), self.ln_k(self.k(c)), self.v(c), self.scale)

    def weights(self, o: np.ndarray, c: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            q = self.ln_q(self.q(Tensor(o))).data
            k = self.ln_k(self.k(Tensor(c))).data
        return nx.attention_weights(q, k, self.scale)


class DiffusionBlock:
    def __init__(self, store: ParamStore, path: str, cfg: MtdConfig, rng):
        d = cfg.dim
        self.ln_self = LayerNorm(store, f"{path}/ln_self", d)
        self.self_attn = SelfAttention(store, f"{path}/self", d, cfg.heads, rng)
        self.cross_attn = CrossAttention(store, f"{path}/cross", d, cfg.d_cond, rng)
        self.ln_ffn = LayerNorm(store, f"{path}/ln_ffn", d)
        self.ffn = FeedForward(store, f"{path}/ffn", d, cfg.ffn_mult * d, rng)

    def self_attention_block(self, h: Tensor) -> Tensor:
        """``o = H + MSA(LN(H))``."""
        return h + self.self_attn(self.ln_self(h))

    def cross_attention_block(self, o: Tensor, c: Tensor) -> Tensor:
        fused = o + self.cross_attn(o, c)
        return fused + self.ffn(self.ln_ffn(fused))

    def __call__(self, h: Tensor, c: Tensor) -> Tensor:
        return self.cross_attention_block(self.self_attention_block(h), c)


class NoisePredictor:
    """Multi-scale conv features -> diffusion blocks -> layer norm -> linear decoder.

    The decoder starts at zero, so an untrained model predicts zero noise.
    """

    def __init__(self, cfg: MtdConfig, params: ParamStore, prefix: str = "mtd"):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        f, dl = cfg.filters_per_scale, cfg.d_lat
        self.convs = []
        for k in cfg.kernels:
            limit = np.sqrt(6.0 / (dl * k + f))
            w = params.add(f"{prefix}/scale{k}/w", rng.uniform(-limit, limit, (f, dl, k)))
            b = params.add(f"{prefix}/scale{k}/b", np.zeros(f))
            self.convs.append((w, b, BatchNorm(params, f"{prefix}/scale{k}/bn", f)))
        self.pos = Linear(params, f"{prefix}/token_pos", 3, cfg.dim, rng, init_std=1.0)
        tc = cfg.d_cond
        self.time_in = Linear(params, f"{prefix}/time/in", tc, tc, rng)
        self.time_out = Linear(params, f"{prefix}/time/out", tc, tc, rng)
        self.blocks = [DiffusionBlock(params, f"{prefix}/block{i}", cfg, rng) for i in range(cfg.blocks)]
        self.ln_out = LayerNorm(params, f"{prefix}/ln_out", cfg.dim)
        self.decoder = Linear(params, f"{prefix}/decoder", cfg.dim, dl, rng, zero=True)
        self.skip = params.add(f"{prefix}/input_skip", np.zeros(1)) if cfg.input_skip else None

    def multi_scale_features(self, z: Tensor, training: bool) -> Tensor:
        """``[B, L, d_lat]`` -> ``[B, L, dim]``: per-kernel conv along tokens, BN, concat."""
        if z.shape[-1] != self.cfg.d_lat:
            raise DimensionError(f"latent width {z.shape[-1]} != {self.cfg.d_lat}")
        zc = nx.swapaxes(z, -1, -2)
        outs = []
        for w, b, bn in self.convs:
            outs.append(bn(nx.swapaxes(nx.conv1d_same(zc, w, b), -1, -2), training))
        return nx.concat(outs, axis=-1)

    def token_positions(self, layout: TokenLayout) -> Tensor:
        spatial = self.pos(Tensor(layout.coords * COORD_SCALE))
        return spatial + sinusoidal_table(layout.window, self.cfg.dim)

    def time_token(self, t) -> Tensor:
        """``[B]`` steps -> ``[B, 1, d_cond]`` timestep condition token."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        emb = sinusoidal_table(t, self.cfg.d_cond)
        tok = self.time_out(nx.gelu(self.time_in(Tensor(emb))))
        return nx.reshape(tok, (len(t), 1, self.cfg.d_cond))

    def with_time(self, c: Tensor, t) -> Tensor:
        """Append the timestep token to a ``[B, L_c, d_cond]`` condition."""
        return nx.concat([c, self.time_token(t)], axis=1)

    def predict_noise(self, z_t, t, c: Tensor, layout: TokenLayout | None = None,
                      training: bool = False, skip_coef=None, out_coef=None) -> Tensor:
        """Noise estimate with the shape of ``z_t``.

        ``c`` is the condition without the timestep token; it is appended
        here. ``layout`` adds per-token position encodings; leave it out to
        get a stack that is equivariant to token permutations.
        """
        z = nx.as_tensor(z_t)
        squeeze = z.ndim == 2
        if squeeze:
            z = nx.reshape(z, (1, *z.shape))
        c = nx.as_tensor(c)
        if c.ndim == 2:
            c = nx.reshape(c, (1, *c.shape))
        t = np.broadcast_to(np.atleast_1d(t), (z.shape[0],))
        h = self.multi_scale_features(z, training)
        if layout is not None:
            if len(layout) != z.shape[1]:
                raise DimensionError(f"layout has {len(layout)} tokens, latent has {z.shape[1]}")
            h = h + self.token_positions(layout)
        cond = self.with_time(c, t)
        for block in self.blocks:
            h = block(h, cond)
        out = self.decoder(self.ln_out(h))
        b = z.shape[0]
        if out_coef is not None:
            out = out * np.broadcast_to(out_coef, (b,))[:, None, None]
        if self.skip is not None:
            coef = np.ones(b) if skip_coef is None else np.broadcast_to(skip_coef, (b,))
            out = out + (z * coef[:, None, None]) * self.skip
        return nx.reshape(out, out.shape[1:]) if squeeze else out
