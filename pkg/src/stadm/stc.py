"""Spatio-temporal condition encoder: LR epoch + electrode coordinates -> condition tokens."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .data import HEAD_RADIUS_M
from .errors import ConfigError, DimensionError
from .layers import BatchNorm, Linear, TransformerBlock, sinusoidal_table
from .numerics import ParamStore, Tensor

# coordinates enter the spatial embedding in head radii rather than metres
COORD_SCALE = 1.0 / HEAD_RADIUS_M


def default_patch_len(n_samples: int, n_patches: int = 9) -> int:
    """Divisor of ``n_samples`` whose patch count is closest to ``n_patches``."""
    divisors = [p for p in range(1, n_samples + 1) if n_samples % p == 0]
    return min(divisors, key=lambda p: (abs(n_samples // p - n_patches), p))


@dataclass
class StcConfig:
    patch_len: int
    dim: int = 64
    heads: int = 4
    conv_kernel: int = 3
    ffn_mult: int = 4
    seed: int = 1

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"stc.dim {self.dim} not divisible by stc.heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("stc conv kernel must be odd")


class ConditionEncoder:
    """Patch each LR channel, embed patches with a conv block, add temporal and
    spatial encodings, then mix all tokens with one Transformer block.

    Token order is channel-major: channel 0's patches, then channel 1's, and
    so on, giving ``n_channels * n_patches`` tokens of width ``dim``.
    """

    def __init__(self, cfg: StcConfig, params: ParamStore, prefix: str = "stc"):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, p, k = cfg.dim, cfg.patch_len, cfg.conv_kernel
        # unit-variance init: a unit-sphere coordinate then embeds at the scale of the BN'd patch features
        self.spatial = Linear(params, f"{prefix}/spatial", 3, d, rng, init_std=1.0)
        limit = np.sqrt(6.0 / (p * k + d))
        self.conv_w = params.add(f"{prefix}/conv/w", rng.uniform(-limit, limit, (d, p, k)))
        self.conv_b = params.add(f"{prefix}/conv/b", np.zeros(d))
        self.bn = BatchNorm(params, f"{prefix}/conv/bn", d)
        self.block = TransformerBlock(params, f"{prefix}/block", d, cfg.heads, rng, cfg.ffn_mult)

    def embed_positions(self, coords: np.ndarray) -> Tensor:
        """``n_channels x 3`` coordinates (metres) -> ``n_channels x dim``."""
        coords = np.asarray(coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise DimensionError(f"coordinates must be n x 3, got {coords.shape}")
        return self.spatial(Tensor(coords * COORD_SCALE))

    def patch_tokens(self, x: np.ndarray, training: bool) -> Tensor:
        """``[B, C, N]`` -> ``[B, C * P, dim]`` conv-block features (no encodings yet)."""
        b, c, n = x.shape
        p = self.cfg.patch_len
        if n % p:
            raise ConfigError(f"patch length {p} does not divide {n} samples")
        n_patches = n // p
        # each channel becomes a length-P sequence whose p input features are the patch samples
        seq = x.reshape(b * c, n_patches, p).transpose(0, 2, 1)
        h = nx.relu(nx.conv1d_same(Tensor(seq), self.conv_w, self.conv_b))
        h = nx.swapaxes(h, -1, -2)
        h = self.bn(h, training)
        return nx.reshape(h, (b, c * n_patches, self.cfg.dim))

    def __call__(self, x: np.ndarray, coords: np.ndarray, training: bool) -> Tensor:
        """Condition tokens for a batch ``x`` of shape ``[B, C, N]`` (already scaled)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        b, c, n = x.shape
        if len(coords) != c:
            raise DimensionError(f"{c} LR channels but {len(coords)} coordinates")
        n_patches = n // self.cfg.patch_len
        h = self.patch_tokens(x, training)
        temporal = np.tile(sinusoidal_table(np.arange(n_patches), self.cfg.dim), (c, 1))
        chan = np.repeat(np.arange(c), n_patches)
        h = h + temporal + nx.embedding(self.embed_positions(coords), chan)
        return self.block(h)
