"""Noise schedules and the closed-form forward/reverse diffusion kernels.

Steps are 1-based throughout: ``beta[t]`` for ``t in 1..T`` is stored at
index ``t - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, RangeError

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_OFFSET = 0.008
MAX_BETA = 0.999
SAMPLING_MODES = ("standard", "paper_literal")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise RangeError(f"step {t} outside 1..{self.T}")

    def coefficients(self, t: int) -> tuple[float, float, float]:
        """(beta_t, alpha_t, alpha_bar_t)."""
        self.check_step(t)
        i = t - 1
        return float(self.beta[i]), float(self.alpha[i]), float(self.alpha_bar[i])


def build_schedule(kind: str, T: int) -> NoiseSchedule:
    if T < 1:
        raise ConfigError(f"schedule needs at least one step, got T={T}")
    if kind == "linear":
        beta = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T) if T > 1 else np.array([LINEAR_BETA_START])
    elif kind == "cosine":
        s = COSINE_OFFSET

        def f(t):
            return np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2

        steps = np.arange(T + 1, dtype=np.float64)
        abar = f(steps) / f(0.0)
        beta = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, MAX_BETA)
        # alpha_bar(0) == 1 exactly, so beta > 0 for every step
        beta = np.maximum(beta, np.finfo(np.float64).tiny)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r} (expected linear or cosine)")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.flags.writeable = False
    return NoiseSchedule(kind=kind, T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Sample of q(z_t | z_0) for a given noise draw."""
    sched.check_step(t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} differs from latent shape {z0.shape}")
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def forward_diffuse_batch(z0: np.ndarray, t: np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Per-example steps ``t`` (shape ``[B]``) for a batch ``z0`` of shape ``[B, ...]``."""
    t = np.asarray(t)
    if t.min() < 1 or t.max() > sched.T:
        raise RangeError(f"steps must lie in 1..{sched.T}")
    if z0.shape != eps.shape:
        raise DimensionError(f"noise shape {eps.shape} differs from latent shape {z0.shape}")
    ab = sched.alpha_bar[t - 1].reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def predict_x0(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Clean-latent estimate implied by a noise estimate."""
    _, _, abar = sched.coefficients(t)
    return (np.asarray(z_t) - np.sqrt(1.0 - abar) * np.asarray(eps_hat)) / np.sqrt(abar)


def reverse_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
                 noise: np.ndarray | None = None, mode: str = "standard",
                 clip: float | None = None) -> np.ndarray:
    """One ancestral step z_t -> z_{t-1}.

    ``standard``: mean ``(z_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)``
    plus ``sqrt(beta_t) * noise`` for t > 1.

    ``paper_literal``: the same mean but divided by ``sqrt(abar_t)`` and with
    no noise term. Its prefactor grows without bound in t, so it is only for
    fidelity experiments.

    ``clip`` (standard mode only) bounds the implied clean latent to
    ``[-clip, clip]`` and forms the same posterior mean from it. Without
    clipping both forms agree; with it, the large ``1 / sqrt(alpha_t)`` of the
    last cosine steps no longer amplifies denoiser error.
    """
    sched.check_step(t)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != z_t.shape:
        raise DimensionError(f"predicted noise shape {eps_hat.shape} differs from {z_t.shape}")
    beta, alpha, abar = sched.coefficients(t)
    inner = z_t - (beta / np.sqrt(1.0 - abar)) * eps_hat
    if mode == "paper_literal":
        return inner / np.sqrt(abar)
    if mode != "standard":
        raise ConfigError(f"unknown sampling mode {mode!r}")
    if clip is None:
        mean = inner / np.sqrt(alpha)
    else:
        abar_prev = sched.alpha_bar[t - 2] if t > 1 else 1.0
        x0 = np.clip(predict_x0(z_t, eps_hat, t, sched), -clip, clip)
        mean = (np.sqrt(abar_prev) * beta * x0 + np.sqrt(alpha) * (1.0 - abar_prev) * z_t) / (1.0 - abar)
    if t == 1:
        return mean
    if noise is None:
        raise ConfigError("standard reverse step needs a noise draw for t > 1")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z_t.shape:
        raise DimensionError(f"noise shape {noise.shape} differs from {z_t.shape}")
    return mean + np.sqrt(beta) * noise
