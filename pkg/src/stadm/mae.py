"""Masked-autoencoder codec that provides the latent space for diffusion.

Each channel is cut into non-overlapping windows; a window is one token.
Pretraining hides a random fraction of tokens from the encoder and asks the
decoder to fill them in. After pretraining, :meth:`MaskedAutoencoder.encode`
maps a full epoch to latent tokens and :meth:`~MaskedAutoencoder.decode` maps
latent tokens back to an epoch.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .container import read_container, write_container
from .data import EegEpoch, Montage
from .errors import ConfigError, DimensionError, ParseError
from .layers import LayerNorm, Linear, TransformerBlock, sinusoidal_table
from .numerics import Adam, ParamStore, Tensor


def windowize(data: np.ndarray, window_length: int) -> np.ndarray:
    """``C x N`` -> ``C x (N / w) x w``, contiguous and order-preserving."""
    c, n = data.shape
    if window_length < 1 or n % window_length:
        raise ConfigError(f"window length {window_length} does not divide {n} samples")
    return data.reshape(c, n // window_length, window_length)


def unwindowize(windows: np.ndarray) -> np.ndarray:
    c, nw, w = windows.shape
    return windows.reshape(c, nw * w)


def default_window_length(n_samples: int, lo: int = 8, hi: int = 16) -> int:
    """Largest divisor of ``n_samples`` giving between ``lo`` and ``hi`` windows."""
    for n_windows in range(lo, hi + 1):
        if n_samples % n_windows == 0:
            return n_samples // n_windows
    raise ConfigError(f"no window length splits {n_samples} samples into {lo}..{hi} windows")


def sample_mask(seed: int, n_tokens: int, mask_ratio: float) -> np.ndarray:
    """Boolean mask with exactly ``round(ratio * n)`` True entries, uniform without replacement."""
    if not 0 <= mask_ratio < 1:
        raise ConfigError(f"mask ratio must be in [0, 1), got {mask_ratio}")
    k = int(round(mask_ratio * n_tokens))
    mask = np.zeros(n_tokens, dtype=bool)
    mask[np.random.default_rng(seed).permutation(n_tokens)[:k]] = True
    return mask


@dataclass
class MaeConfig:
    n_channels: int
    n_samples: int
    window_length: int
    d_lat: int = 32
    heads: int = 4
    enc_blocks: int = 2
    dec_blocks: int = 1
    mask_ratio: float = 0.5
    ffn_mult: int = 4
    recon_weight: float = 1.0
    signal_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples % self.window_length:
            raise ConfigError(f"window length {self.window_length} does not divide {self.n_samples} samples")
        if self.d_lat % self.heads:
            raise ConfigError(f"latent width {self.d_lat} not divisible by {self.heads} heads")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError(f"mask ratio must be in [0, 1), got {self.mask_ratio}")

    @property
    def n_windows(self) -> int:
        return self.n_samples // self.window_length

    @property
    def n_tokens(self) -> int:
        return self.n_channels * self.n_windows


class MaskedAutoencoder:
    def __init__(self, cfg: MaeConfig, params: ParamStore | None = None):
        self.cfg = cfg
        self.params = params if params is not None else ParamStore()
        rng = np.random.default_rng(cfg.seed)
        d, w, s = cfg.d_lat, cfg.window_length, self.params
        self.embed = Linear(s, "mae/enc/embed", w, d, rng)
        self.enc_chan = s.add("mae/enc/chan", 0.02 * rng.standard_normal((cfg.n_channels, d)))
        self.enc_blocks = [TransformerBlock(s, f"mae/enc/block{i}", d, cfg.heads, rng, cfg.ffn_mult)
                           for i in range(cfg.enc_blocks)]
        self.enc_ln = LayerNorm(s, "mae/enc/ln", d)
        self.dec_embed = Linear(s, "mae/dec/embed", d, d, rng)
        self.mask_token = s.add("mae/dec/mask_token", 0.02 * rng.standard_normal(d))
        self.dec_chan = s.add("mae/dec/chan", 0.02 * rng.standard_normal((cfg.n_channels, d)))
        self.dec_blocks = [TransformerBlock(s, f"mae/dec/block{i}", d, cfg.heads, rng, cfg.ffn_mult)
                           for i in range(cfg.dec_blocks)]
        self.dec_ln = LayerNorm(s, "mae/dec/ln", d)
        self.head = Linear(s, "mae/dec/head", d, w, rng)
        self.chan_idx = np.repeat(np.arange(cfg.n_channels), cfg.n_windows)
        self.pos_table = sinusoidal_table(np.tile(np.arange(cfg.n_windows), cfg.n_channels), d)

    # -- token plumbing

    def tokens(self, data: np.ndarray) -> np.ndarray:
        """``[..., C, N]`` signal (uV) -> ``[..., L, w]`` scaled window tokens."""
        cfg = self.cfg
        if data.shape[-2:] != (cfg.n_channels, cfg.n_samples):
            raise DimensionError(
                f"codec expects {cfg.n_channels} x {cfg.n_samples} epochs, got {data.shape[-2:]}")
        lead = data.shape[:-2]
        return data.reshape(*lead, cfg.n_tokens, cfg.window_length) / cfg.signal_scale

    def untokens(self, tokens: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        lead = tokens.shape[:-2]
        return tokens.reshape(*lead, cfg.n_channels, cfg.n_samples) * cfg.signal_scale

    def _encode(self, tokens: Tensor, keep: np.ndarray | None) -> Tensor:
        chan = nx.embedding(self.enc_chan, self.chan_idx)
        x = self.embed(tokens) + self.pos_table + chan
        if keep is not None:
            x = nx.take(x, keep, axis=-2)
        for block in self.enc_blocks:
            x = block(x)
        return self.enc_ln(x)

    def _decode(self, seq: Tensor) -> Tensor:
        """``seq`` is already in decoder space (embedded latents and mask tokens)."""
        x = seq + self.pos_table + nx.embedding(self.dec_chan, self.chan_idx)
        for block in self.dec_blocks:
            x = block(x)
        return self.head(self.dec_ln(x))

    # -- public API

    def losses(self, data: np.ndarray, mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """(masked-window MSE, full reconstruction MSE) for one epoch (``C x N``).

        The masked term runs the encoder on visible tokens only and scores the
        decoder on the hidden ones; an empty mask scores exactly 0. The second
        term is the plain encode -> decode round trip on all tokens.
        """
        cfg = self.cfg
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (cfg.n_tokens,):
            raise DimensionError(f"mask must have {cfg.n_tokens} entries")
        masked = np.flatnonzero(mask)
        visible = np.flatnonzero(~mask)
        if visible.size == 0:
            raise ConfigError("every token is masked; lower the mask ratio")
        target = self.tokens(data)
        if masked.size:
            seq = self.dec_embed(self._encode(Tensor(target), visible))
            fill = nx.broadcast_to(self.mask_token, (masked.size, cfg.d_lat))
            order = np.argsort(np.concatenate([visible, masked]), kind="stable")
            pred = self._decode(nx.take(nx.concat([seq, fill], axis=0), order, axis=0))
            masked_loss = nx.mse(nx.take(pred, masked, axis=0), target[masked])
        else:
            masked_loss = Tensor(0.0)
        recon = self._decode(self.dec_embed(self._encode(Tensor(target), None)))
        return masked_loss, nx.mse(recon, target)

    def masked_loss(self, data: np.ndarray, mask: np.ndarray) -> Tensor:
        return self.losses(data, mask)[0]

    def encode_tokens(self, tokens: np.ndarray) -> np.ndarray:
        with nx.no_grad():
            return self._encode(Tensor(tokens), None).data

    def decode_tokens(self, latent: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        if latent.shape[-2:] != (cfg.n_tokens, cfg.d_lat):
            raise DimensionError(f"latent must be {cfg.n_tokens} x {cfg.d_lat}, got {latent.shape[-2:]}")
        with nx.no_grad():
            return self._decode(self.dec_embed(Tensor(latent))).data

    def encode(self, epoch: EegEpoch | np.ndarray) -> np.ndarray:
        """Full (unmasked) token set -> ``L x d_lat`` latent sequence."""
        data = epoch.data if isinstance(epoch, EegEpoch) else np.asarray(epoch, dtype=np.float64)
        return self.encode_tokens(self.tokens(data))

    def decode_array(self, z: np.ndarray) -> np.ndarray:
        return self.untokens(self.decode_tokens(z))

    def decode(self, z: np.ndarray, montage: Montage, sample_rate_hz: float) -> EegEpoch:
        return EegEpoch(montage, sample_rate_hz, self.decode_array(z))

    def pretrain_step(self, epoch: EegEpoch | np.ndarray, seed: int) -> float:
        """One pretraining step; returns the masked-window loss.

        Gradients of ``masked + recon_weight * round_trip`` accumulate into
        ``params``. The round-trip term is what lets :meth:`decode` invert
        :meth:`encode`; the masked term alone never supervises visible slots.
        """
        data = epoch.data if isinstance(epoch, EegEpoch) else np.asarray(epoch, dtype=np.float64)
        mask = sample_mask(seed, self.cfg.n_tokens, self.cfg.mask_ratio)
        if mask.all():
            raise ConfigError("mask ratio rounds to every token")
        masked, round_trip = self.losses(data, mask)
        objective = masked + round_trip * self.cfg.recon_weight
        if objective.requires_grad:
            objective.backward()
        value = float(masked.data)
        if not np.isfinite(value):
            raise nx.NumericError("masked reconstruction loss is not finite")
        return value

    # -- persistence

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        header = {"kind": "mae", "config": asdict(self.cfg), **(extra or {})}
        write_container(path, header, self.params.to_arrays())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MaskedAutoencoder":
        header, arrays = read_container(path)
        return cls.from_container(header, arrays)

    @classmethod
    def from_container(cls, header: dict, arrays: dict) -> "MaskedAutoencoder":
        if header.get("kind") != "mae":
            raise ParseError("checkpoint is not a masked-autoencoder codec")
        model = cls(MaeConfig(**header["config"]))
        model.params.load_arrays(arrays)
        return model


def pretrain(model: MaskedAutoencoder, epochs: Sequence[EegEpoch | np.ndarray], steps: int,
             lr: float = 1e-3, seed: int = 0, log_every: int = 0) -> list[float]:
    """Cycle through ``epochs`` for ``steps`` Adam updates; returns the loss trace."""
    if not epochs:
        raise ConfigError("pretraining needs at least one epoch")
    opt = Adam(model.params, lr=lr)
    trace = []
    for step in range(steps):
        model.params.zero_grad()
        loss = model.pretrain_step(epochs[step % len(epochs)], seed=seed * 1_000_003 + step)
        opt.step()
        trace.append(loss)
        if log_every and (step + 1) % log_every == 0:
            print(f"mae step {step + 1}/{steps} loss {loss:.5f}")
    return trace


def signal_scale(epochs: Sequence[EegEpoch]) -> float:
    """RMS over all values, used to bring epochs to unit scale."""
    sq = np.mean([np.mean(e.data ** 2) for e in epochs])
    return float(np.sqrt(sq)) if sq > 0 else 1.0
