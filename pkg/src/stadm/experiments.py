"""Scaled-down experiment recipes on synthetic data.

Used by the acceptance suite and the scripts in ``scripts/``; each returns
plain numbers so callers decide how to report them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import EegEpoch, builtin_montage, downsample_channels, synth_epoch, synth_pairs
from .evaluation import MetricsReport, band_psd, held_out_accuracy, metrics
from .pipeline import Checkpoint, PairSet, TrainConfig, pairs_from_epochs, sample_arrays, train_pairs

HR_MONTAGE = "synthetic-32"

# 16 -> 32 channels, one 45-sample token per channel half; the 4 training
# pairs are repeated to fill each batch of 16
OVERFIT_CONFIG = TrainConfig(batch_size=16, learning_rate=4e-3, window_length=45,
                             max_steps=2000, epochs=100_000, seed=0)
# condition patches aligned with the 45-sample latent windows, so each HR
# token has one LR token per channel covering the same span
TREND_CONFIG = OVERFIT_CONFIG.replace(max_steps=1500, stc_patch_len=45)

# disjoint seed ranges for training, test and probe epochs
TRAIN_SEEDS = 0
TEST_SEEDS = 50_000
PROBE_SEEDS = 100_000


def synthetic_pairs(seeds: Sequence[int], factor: int = 2, hr: str = HR_MONTAGE) -> PairSet:
    """LR/HR pairs; ``factor`` divides the HR channel count."""
    return pairs_from_epochs(synth_pairs(seeds, builtin_montage(hr), factor),
                             [f"s{int(s)}" for s in seeds])


def score_pairs(ckpt: Checkpoint, pairs: PairSet, seed: int = 0) -> list[MetricsReport]:
    """Super-resolve every LR epoch (pair ``i`` uses sampling seed ``seed * 1000 + i``)."""
    sr = sample_arrays(ckpt.model(), pairs.lr, [seed * 1000 + i for i in range(len(pairs))])
    return [metrics(hr, s) for hr, s in zip(pairs.hr, sr)]


def mean_of(reports: Sequence[MetricsReport], name: str) -> float:
    return float(np.mean([r.means()[name] for r in reports]))


def overfit_run(cfg: TrainConfig = OVERFIT_CONFIG, n_pairs: int = 4, factor: int = 2,
                seed: int = 0) -> tuple[Checkpoint, list[MetricsReport]]:
    """Train on ``n_pairs`` fixed pairs and score the model on those same pairs."""
    pairs = synthetic_pairs(range(TRAIN_SEEDS, TRAIN_SEEDS + n_pairs), factor)
    ckpt = train_pairs(cfg, pairs)
    return ckpt, score_pairs(ckpt, pairs, seed)


@dataclass
class TrendPoint:
    factor: int
    pcc: list[float]  # one mean per sampling seed
    nmse: list[float]
    final_loss: float

    @property
    def mean_pcc(self) -> float:
        return float(np.mean(self.pcc))

    @property
    def mean_nmse(self) -> float:
        return float(np.mean(self.nmse))


def factor_trend(factors: Sequence[int] = (2, 4), n_train: int = 256, n_test: int = 32,
                 seeds: Sequence[int] = (0, 1, 2), cfg: TrainConfig = TREND_CONFIG) -> list[TrendPoint]:
    """One model per scaling factor, scored on held-out pairs under several sampling seeds."""
    out = []
    for factor in factors:
        train = synthetic_pairs(range(TRAIN_SEEDS, TRAIN_SEEDS + n_train), factor)
        test = synthetic_pairs(range(TEST_SEEDS, TEST_SEEDS + n_test), factor)
        ckpt = train_pairs(cfg, train)
        runs = [score_pairs(ckpt, test, s) for s in seeds]
        out.append(TrendPoint(factor, [mean_of(r, "pcc") for r in runs], [mean_of(r, "nmse") for r in runs],
                              float(np.mean(ckpt.loss_trace[-50:]))))
    return out


@dataclass
class ProbeResult:
    seed: int
    sr: float
    lr: float
    hr: float


def probe_comparison(ckpt: Checkpoint, seeds: Sequence[int] = range(5), per_class: int = 40) -> list[ProbeResult]:
    """Held-out accuracy of the band-power probe on SR, LR and HR versions of the same epochs.

    Each seed draws fresh normal/abnormal HR epochs, derives their LR subsets
    with the training factor, super-resolves them and splits train/test.
    """
    geometry = ckpt.geometry
    factor = len(geometry.hr_montage) // len(geometry.lr_montage)
    model = ckpt.model()
    results = []
    for seed in seeds:
        base = PROBE_SEEDS + 10_000 * int(seed)
        hrs: list[EegEpoch] = []
        labels = []
        for i in range(per_class):
            for label in (0, 1):
                hrs.append(synth_epoch(base + 2 * i + label, geometry.hr_montage,
                                       duration_s=geometry.n_samples / geometry.sample_rate_hz,
                                       sample_rate_hz=geometry.sample_rate_hz, abnormal=bool(label)))
                labels.append(label)
        lrs = [downsample_channels(h, factor, relative=True)[0] for h in hrs]
        sr = sample_arrays(model, np.stack([e.data for e in lrs]), [base + i for i in range(len(lrs))])
        srs = [h.with_data(x) for h, x in zip(hrs, sr)]

        def acc(epochs):
            return held_out_accuracy([band_psd(e) for e in epochs], labels, seed=int(seed))

        results.append(ProbeResult(int(seed), acc(srs), acc(lrs), acc(hrs)))
    return results
