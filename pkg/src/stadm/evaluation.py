"""Reconstruction metrics, band-power spectra and the band-power linear probe."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import welch

from .data import BANDS, EegEpoch, atomic_write_bytes
from .errors import ConfigError, DataError, DimensionError, NumericError

SNR_CAP_DB = 120.0
WELCH_SEGMENT = 64
METRIC_NAMES = ("pcc", "mae", "nmse", "snr_db")


@dataclass(frozen=True)
class MetricsReport:
    """Per-channel metrics; the properties give channel means."""
    pcc_per_channel: np.ndarray
    mae_per_channel: np.ndarray
    nmse_per_channel: np.ndarray
    snr_per_channel: np.ndarray

    @property
    def pcc(self) -> float:
        return float(self.pcc_per_channel.mean())

    @property
    def mae(self) -> float:
        return float(self.mae_per_channel.mean())

    @property
    def nmse(self) -> float:
        return float(self.nmse_per_channel.mean())

    @property
    def snr_db(self) -> float:
        return float(self.snr_per_channel.mean())

    def means(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _as_array(x: EegEpoch | np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(x.data if isinstance(x, EegEpoch) else x, dtype=np.float64))


def metrics(reference: EegEpoch | np.ndarray, candidate: EegEpoch | np.ndarray) -> MetricsReport:
    """PCC, MAE, NMSE and SNR per channel of ``candidate`` against ``reference``.

    A channel with zero variance in either epoch has no defined correlation;
    that raises :class:`NumericError` naming the channels instead of
    reporting NaN.
    """
    if isinstance(reference, EegEpoch) and isinstance(candidate, EegEpoch):
        if reference.sample_rate_hz != candidate.sample_rate_hz:
            raise DimensionError("reference and candidate sample rates differ")
    y, yh = _as_array(reference), _as_array(candidate)
    if y.shape != yh.shape:
        raise DimensionError(f"reference {y.shape} and candidate {yh.shape} differ in shape")
    yc = y - y.mean(axis=1, keepdims=True)
    hc = yh - yh.mean(axis=1, keepdims=True)
    var_y, var_h = np.sum(yc ** 2, axis=1), np.sum(hc ** 2, axis=1)
    flat = np.flatnonzero((var_y == 0) | (var_h == 0))
    if flat.size:
        raise NumericError(f"PCC undefined for zero-variance channels {flat.tolist()}")
    pcc = np.clip(np.sum(yc * hc, axis=1) / np.sqrt(var_y * var_h), -1.0, 1.0)
    err = y - yh
    power, err_power = np.sum(y ** 2, axis=1), np.sum(err ** 2, axis=1)
    nmse = err_power / power
    with np.errstate(divide="ignore"):
        snr = np.where(err_power > 0, 10.0 * np.log10(power / np.where(err_power > 0, err_power, 1.0)), np.inf)
    return MetricsReport(pcc, np.mean(np.abs(err), axis=1), nmse, np.minimum(snr, SNR_CAP_DB))


# ---------------------------------------------------------------- spectra

def _band_integral(freqs: np.ndarray, psd: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Rectangle-rule integral of the PSD (last axis) over bins with ``lo <= f < hi``.

    A band narrower than the bin spacing can hold no bin and integrates to 0.
    """
    sel = (freqs >= lo) & (freqs < hi)
    return psd[..., sel].sum(axis=-1) * (freqs[1] - freqs[0])


def welch_psd(data: np.ndarray, sample_rate_hz: float) -> tuple[np.ndarray, np.ndarray]:
    n = data.shape[-1]
    seg = min(n, WELCH_SEGMENT)
    return welch(data, fs=sample_rate_hz, window="hann", nperseg=seg, noverlap=seg // 2,
                 detrend="constant", scaling="density", axis=-1)


def band_psd(epoch: EegEpoch) -> np.ndarray:
    """``n_channels x 5`` band powers (delta..gamma) from a Welch estimate.

    With 64-sample segments at 256 Hz the bins sit 4 Hz apart, so the
    delta band is below the resolution and reads 0.
    """
    top = max(hi for _, hi in BANDS.values())
    if epoch.sample_rate_hz / 2 <= top:
        raise ConfigError(f"sample rate {epoch.sample_rate_hz} Hz cannot resolve the {top} Hz band edge")
    freqs, psd = welch_psd(epoch.data, epoch.sample_rate_hz)
    return np.stack([_band_integral(freqs, psd, lo, hi) for lo, hi in BANDS.values()], axis=-1)


def format_band_csv(epoch: EegEpoch, features: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["channel", *BANDS])
    for label, row in zip(epoch.montage.labels, features):
        w.writerow([label, *(f"{v:.6g}" for v in row)])
    return buf.getvalue()


# ---------------------------------------------------------------- linear probe

@dataclass
class LinearProbe:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    train_accuracy: float

    def scores(self, features: Sequence[np.ndarray]) -> np.ndarray:
        x = (probe_features(features) - self.mean) / self.std
        return x @ self.weights + self.bias

    def predict(self, features: Sequence[np.ndarray]) -> np.ndarray:
        return (self.scores(features) > 0).astype(int)

    def accuracy(self, features: Sequence[np.ndarray], labels: Sequence[int]) -> float:
        return float(np.mean(self.predict(features) == np.asarray(labels)))


def probe_features(features: Sequence[np.ndarray]) -> np.ndarray:
    """Flattened log10 band powers, one row per example."""
    x = np.stack([np.asarray(f, dtype=np.float64).ravel() for f in features])
    return np.log10(x + 1e-12)


def linear_probe_train(features: Sequence[np.ndarray], labels: Sequence[int], steps: int = 500,
                       lr: float = 0.5, l2: float = 1e-3, seed: int = 0) -> LinearProbe:
    """Logistic regression by full-batch gradient descent on standardised features."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 1 or len(y) != len(features):
        raise DimensionError("one label per feature matrix")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise DataError("labels must be 0 or 1")
    if min(np.sum(y == 0), np.sum(y == 1)) < 2:
        raise DataError("the probe needs at least two examples of each class")
    raw = probe_features(features)
    mean, std = raw.mean(axis=0), raw.std(axis=0)
    std[std == 0] = 1.0
    x = (raw - mean) / std
    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal(x.shape[1])
    b = 0.0
    n = len(y)
    for _ in range(steps):
        z = x @ w + b
        p = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
        g = p - y
        w -= lr * (x.T @ g / n + l2 * w)
        b -= lr * float(g.mean())
    train_acc = float(np.mean(((x @ w + b) > 0) == (y == 1)))
    return LinearProbe(w, b, mean, std, train_acc)


def train_test_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < test_fraction < 1:
        raise ConfigError("test fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def held_out_accuracy(features: Sequence[np.ndarray], labels: Sequence[int], seed: int,
                      test_fraction: float = 0.3, steps: int = 500) -> float:
    """Train on a seeded split, score on the rest."""
    labels = np.asarray(labels)
    train_idx, test_idx = train_test_split(len(labels), test_fraction, seed)
    probe = linear_probe_train([features[i] for i in train_idx], labels[train_idx], steps=steps, seed=seed)
    return probe.accuracy([features[i] for i in test_idx], labels[test_idx])


# ---------------------------------------------------------------- run reports

def worker_count() -> int:
    raw = os.environ.get("STADM_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STADM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("STADM_THREADS must be at least 1")
    return n


def report_rows(names: Sequence[str], factors: Sequence[int], reports: Sequence[MetricsReport]) -> list[list]:
    """Per-pair rows followed by one mean row per scaling factor (ascending)."""
    rows = [[name, f, *r.means().values()] for name, f, r in zip(names, factors, reports)]
    for f in sorted(set(factors)):
        sel = np.array([r[2:] for r in rows if r[1] == f], dtype=np.float64)
        rows.append(["mean", f, *sel.mean(axis=0)])
    return rows


def format_report(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["pair", "factor", *METRIC_NAMES])
    for name, factor, *vals in rows:
        w.writerow([name, factor, *(f"{v:.6g}" for v in vals)])
    return buf.getvalue()


def evaluate_run(checkpoint, data_dir: str | os.PathLike, seed: int = 0, mode: str = "standard",
                 out: str | os.PathLike | None = None) -> str:
    """Super-resolve every test pair, score it against its HR epoch, return (and optionally write) CSV.

    Pair ``i`` (sorted by name) is sampled with seed ``seed + i``, so the
    report does not depend on how the work is split across threads.
    """
    from .pipeline import load_pairs, super_resolve_many

    pairs = load_pairs(data_dir)
    model = checkpoint.model()
    lrs = [EegEpoch(pairs.geometry.lr_montage, pairs.geometry.sample_rate_hz, x) for x in pairs.lr]
    seeds = [seed + i for i in range(len(pairs))]
    n_workers = min(worker_count(), len(pairs))
    chunks = [list(range(len(pairs)))[i::n_workers] for i in range(n_workers)]

    def run(idx: list[int]):
        return idx, super_resolve_many(model, [lrs[i] for i in idx], [seeds[i] for i in idx], mode)

    srs: list = [None] * len(pairs)
    if n_workers == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(run, chunks))
    for idx, part in results:
        for i, sr in zip(idx, part):
            srs[i] = sr
    factor = len(pairs.geometry.hr_montage) // len(pairs.geometry.lr_montage)
    reports = [metrics(hr, sr.data) for hr, sr in zip(pairs.hr, srs)]
    text = format_report(report_rows(pairs.names, [factor] * len(pairs), reports))
    if out is not None:
        atomic_write_bytes(out, text.encode("utf-8"))
    return text
