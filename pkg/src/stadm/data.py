"""Montages, epochs, channel degradation, synthetic EEG, filtering and epoch files."""
from __future__ import annotations

import functools
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .errors import ConfigError, DataError, DimensionError, ParseError, RangeError

HEAD_RADIUS_M = 0.09
CAP_MIN_Z = -0.3
BUILTIN_PREFIX = "synthetic-"
BUILTIN_FULL = 256

# Table I: scaling factor -> channel count of the LR montage
SCALING_CHANNELS = {2: 128, 4: 64, 8: 32, 16: 16}

BANDS = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 13.0),
    "beta": (13.0, 30.0),
    "gamma": (30.0, 40.0),
}

NOTCH_Q = 30.0
DEFAULT_HIGHPASS_HZ = 0.5
DEFAULT_NOTCHES_HZ = (50.0, 100.0, 150.0, 200.0)
DESK_RATE_HZ = 256.0
EPOCH_SECONDS = 0.350

EPOCH_MAGIC = b"STAD"
EPOCH_VERSION = 1
MONTAGE_SUFFIX = ".montage"


@dataclass(frozen=True, eq=False)
class Montage:
    name: str
    labels: tuple[str, ...]
    positions: np.ndarray  # n x 3, metres, head-centred

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] != len(self.labels):
            raise ParseError(f"montage {self.name!r}: need one 3D position per label")
        if len(set(self.labels)) != len(self.labels):
            dup = sorted({lab for lab in self.labels if self.labels.count(lab) > 1})
            raise ParseError(f"montage {self.name!r}: duplicate labels {dup}")
        if not np.isfinite(pos).all():
            raise ParseError(f"montage {self.name!r}: non-finite coordinates")
        pos.flags.writeable = False
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int], name: str) -> "Montage":
        idx = list(indices)
        return Montage(name, tuple(self.labels[i] for i in idx), self.positions[idx])

    def same_layout(self, other: "Montage") -> bool:
        return self.labels == other.labels and np.array_equal(self.positions, other.positions)


@dataclass(frozen=True, eq=False)
class EegEpoch:
    montage: Montage
    sample_rate_hz: float
    data: np.ndarray  # channels x samples, microvolts

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"epoch data must be channels x samples, got shape {data.shape}")
        if data.shape[0] != len(self.montage):
            raise DimensionError(
                f"epoch has {data.shape[0]} rows but montage {self.montage.name!r} has {len(self.montage)} channels")
        if not self.sample_rate_hz > 0:
            raise ConfigError("sample rate must be positive")
        object.__setattr__(self, "data", data)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray, montage: Montage | None = None) -> "EegEpoch":
        return EegEpoch(montage or self.montage, self.sample_rate_hz, data)


@dataclass(frozen=True)
class ScalingFactor:
    factor: int
    target_channels: int
    montage_name: str

    @classmethod
    def from_factor(cls, factor: int) -> "ScalingFactor":
        if factor not in SCALING_CHANNELS:
            raise ConfigError(f"scaling factor must be one of {sorted(SCALING_CHANNELS)}, got {factor}")
        n = SCALING_CHANNELS[factor]
        return cls(factor, n, f"{BUILTIN_PREFIX}{n}")


# ---------------------------------------------------------------- montages

def fibonacci_cap(n: int, radius: float = HEAD_RADIUS_M, z_min: float = CAP_MIN_Z) -> np.ndarray:
    """``n`` roughly equal-area points on the sphere cap ``z >= z_min * radius``."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n * (1.0 - z_min)
    r = np.sqrt(1.0 - z * z)
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return radius * np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def farthest_point_order(positions: np.ndarray, n: int | None = None, start: int = 0) -> np.ndarray:
    """Greedy farthest-point ordering; ties go to the lowest index."""
    pos = np.asarray(positions, dtype=np.float64)
    total = pos.shape[0]
    n = total if n is None else n
    order = [start]
    dist = np.linalg.norm(pos - pos[start], axis=1)
    for _ in range(1, n):
        nxt = int(np.argmax(dist))
        order.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pos - pos[nxt], axis=1))
    return np.array(order[:n], dtype=np.intp)


@functools.lru_cache(maxsize=None)
def _builtin_full() -> Montage:
    labels = tuple(f"E{i + 1}" for i in range(BUILTIN_FULL))
    return Montage(f"{BUILTIN_PREFIX}{BUILTIN_FULL}", labels, fibonacci_cap(BUILTIN_FULL))


@functools.lru_cache(maxsize=None)
def _builtin_order() -> np.ndarray:
    return farthest_point_order(_builtin_full().positions)


@functools.lru_cache(maxsize=None)
def builtin_montage(name: str) -> Montage:
    """``synthetic-N``: the first N farthest-point picks from the 256-electrode cap.

    Channels are kept in cap order, so every built-in montage is a subset of
    every larger one.
    """
    if not name.startswith(BUILTIN_PREFIX):
        raise ParseError(f"unknown built-in montage {name!r}")
    try:
        n = int(name[len(BUILTIN_PREFIX):])
    except ValueError:
        raise ParseError(f"unknown built-in montage {name!r}") from None
    if not 1 <= n <= BUILTIN_FULL:
        raise ParseError(f"built-in montages have 1..{BUILTIN_FULL} channels, got {n}")
    full = _builtin_full()
    if n == BUILTIN_FULL:
        return full
    return full.subset(np.sort(_builtin_order()[:n]), name)


def is_builtin(name: str) -> bool:
    try:
        builtin_montage(name)
    except ParseError:
        return False
    return True


def parse_montage(text: str, name: str) -> Montage:
    labels, rows = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"montage {name!r} line {lineno}: expected 'LABEL x y z'")
        try:
            xyz = [float(v) for v in parts[1:]]
        except ValueError:
            raise ParseError(f"montage {name!r} line {lineno}: malformed coordinates") from None
        labels.append(parts[0])
        rows.append(xyz)
    if not labels:
        raise ParseError(f"montage {name!r} has no channels")
    return Montage(name, tuple(labels), np.array(rows, dtype=np.float64))


def format_montage(montage: Montage) -> str:
    lines = [f"# {montage.name}"]
    lines += [f"{lab} {float(x)!r} {float(y)!r} {float(z)!r}" for lab, (x, y, z) in zip(montage.labels, montage.positions)]
    return "\n".join(lines) + "\n"


def load_montage(name_or_path: str | os.PathLike, search_dirs: Sequence[str | os.PathLike] = ()) -> Montage:
    """Built-in name, path to a montage file, or a name found as ``<dir>/<name>.montage``."""
    key = str(name_or_path)
    if is_builtin(key):
        return builtin_montage(key)
    path = Path(key)
    if path.is_file():
        name = path.name[:-len(MONTAGE_SUFFIX)] if path.name.endswith(MONTAGE_SUFFIX) else path.stem
        return parse_montage(path.read_text(encoding="utf-8"), name)
    for d in search_dirs:
        candidate = Path(d) / f"{key}{MONTAGE_SUFFIX}"
        if candidate.is_file():
            return parse_montage(candidate.read_text(encoding="utf-8"), key)
    raise DataError(f"montage {key!r} is neither built-in nor a readable montage file")


# ---------------------------------------------------------------- channel degradation

def select_channels(hr: EegEpoch, n_keep: int) -> tuple[EegEpoch, np.ndarray]:
    """Keep ``n_keep`` rows: the stored built-in subset when available, else farthest-point picks."""
    n = hr.n_channels
    if not 1 <= n_keep <= n:
        raise RangeError(f"cannot keep {n_keep} of {n} channels")
    montage = hr.montage
    target = f"{BUILTIN_PREFIX}{n_keep}"
    kept = None
    if is_builtin(montage.name) and is_builtin(target):
        sub = builtin_montage(target)
        where = {lab: i for i, lab in enumerate(montage.labels)}
        if all(lab in where for lab in sub.labels):
            kept = np.array([where[lab] for lab in sub.labels], dtype=np.intp)
            lr_montage = sub
    if kept is None:
        kept = np.sort(farthest_point_order(montage.positions, n_keep))
        lr_montage = montage if n_keep == n else montage.subset(kept, f"{montage.name}-sub{n_keep}")
    return hr.with_data(hr.data[kept], lr_montage), kept


def downsample_channels(hr: EegEpoch, sf: ScalingFactor | int, relative: bool = False) -> tuple[EegEpoch, np.ndarray]:
    """Channel-level degradation.

    By default ``sf`` follows the fixed factor -> channel-count table
    (2/4/8/16 -> 128/64/32/16). With ``relative=True`` the factor divides the
    current channel count instead, which is how desk-scale pairs are built
    from a 32-channel HR montage.
    """
    factor = sf.factor if isinstance(sf, ScalingFactor) else int(sf)
    if relative:
        if factor < 1 or hr.n_channels % factor:
            raise RangeError(f"factor {factor} does not divide {hr.n_channels} channels")
        n_keep = hr.n_channels // factor
    else:
        n_keep = ScalingFactor.from_factor(factor).target_channels
    if n_keep > hr.n_channels:
        raise RangeError(f"factor {factor} needs {n_keep} channels but the epoch has {hr.n_channels}")
    return select_channels(hr, n_keep)


# ---------------------------------------------------------------- synthetic data

def _pink_noise(rng: np.random.Generator, n_channels: int, n_samples: int) -> np.ndarray:
    spec = rng.standard_normal((n_channels, n_samples // 2 + 1)) + 1j * rng.standard_normal((n_channels, n_samples // 2 + 1))
    f = np.arange(spec.shape[1], dtype=np.float64)
    scale = np.zeros_like(f)
    scale[1:] = 1.0 / np.sqrt(f[1:])
    return np.fft.irfft(spec * scale, n=n_samples, axis=1)


def synth_epoch(seed: int, montage: Montage, duration_s: float = EPOCH_SECONDS,
                sample_rate_hz: float = DESK_RATE_HZ, n_sources: int = 3, *,
                frequencies: Sequence[float] | None = None, abnormal: bool = False,
                spread_m: float = 0.04, noise_db: float = -10.0,
                source_points: Sequence[Sequence[float]] | None = None) -> EegEpoch:
    """Band-limited bursts from scalp point sources plus 1/f background.

    Each source is a Gaussian-windowed sinusoid whose frequency is drawn from
    one of the five EEG bands (or taken from ``frequencies``), mixed onto the
    electrodes with gains ``exp(-d^2 / 2 spread^2)``. ``abnormal`` adds one
    strong beta-band source. Background noise is scaled to ``noise_db``
    relative to the source power. ``source_points`` pins the source
    locations (metres) instead of drawing them on the scalp.
    """
    if n_sources < 1:
        raise ConfigError("need at least one source")
    if frequencies is not None and len(frequencies) != n_sources:
        raise ConfigError("one frequency per source")
    if source_points is not None and len(source_points) != n_sources:
        raise ConfigError("one source point per source")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate_hz))
    t = np.arange(n) / sample_rate_hz
    radius = float(np.linalg.norm(montage.positions, axis=1).mean())
    band_edges = list(BANDS.values())

    def source(freq: float, amp: float, fixed=None) -> np.ndarray:
        z = rng.uniform(0.0, 1.0)
        phi = rng.uniform(0.0, 2 * np.pi)
        r = np.sqrt(1 - z * z)
        point = radius * np.array([r * np.cos(phi), r * np.sin(phi), z]) if fixed is None else np.asarray(fixed)
        d2 = ((montage.positions - point) ** 2).sum(axis=1)
        gains = np.exp(-d2 / (2 * spread_m ** 2))
        centre = rng.uniform(0.25, 0.75) * duration_s
        width = rng.uniform(0.3, 0.6) * duration_s
        phase = rng.uniform(0, 2 * np.pi)
        wave = amp * np.exp(-0.5 * ((t - centre) / width) ** 2) * np.sin(2 * np.pi * freq * t + phase)
        return gains[:, None] * wave[None, :]

    clean = np.zeros((len(montage), n))
    for i in range(n_sources):
        if frequencies is not None:
            freq = float(frequencies[i])
        else:
            lo, hi = band_edges[rng.integers(len(band_edges))]
            freq = rng.uniform(lo, hi)
        clean += source(freq, rng.uniform(15.0, 35.0), None if source_points is None else source_points[i])
    if abnormal:
        clean += source(rng.uniform(*BANDS["beta"]), rng.uniform(40.0, 60.0))
    noise = _pink_noise(rng, len(montage), n)
    p_sig = np.mean(clean ** 2)
    p_noise = np.mean(noise ** 2)
    if p_noise > 0:
        noise *= np.sqrt(p_sig * 10 ** (noise_db / 10) / p_noise)
    data = clean + noise
    peak = np.abs(data).max()
    if peak > 500.0:
        raise RangeError(f"synthetic epoch peaks at {peak:.1f} uV (> 500 uV); use fewer sources")
    return EegEpoch(montage, float(sample_rate_hz), data)


# ---------------------------------------------------------------- filtering / epoching

def _check_freq(f: float, rate: float, what: str) -> None:
    if not 0 < f < rate / 2:
        raise ConfigError(f"{what} {f} Hz must lie strictly between 0 and Nyquist ({rate / 2} Hz)")


def preprocess(raw: EegEpoch, highpass_hz: float | None = DEFAULT_HIGHPASS_HZ,
               notch_list_hz: Sequence[float] = DEFAULT_NOTCHES_HZ) -> EegEpoch:
    """Zero-phase 2nd-order Butterworth high-pass, then a Q=30 notch per frequency.

    Filters run forward and backward with odd-extension padding, so the
    whole operation is linear and phase-free.
    """
    rate = raw.sample_rate_hz
    if highpass_hz is not None:
        _check_freq(highpass_hz, rate, "high-pass cutoff")
    for f in notch_list_hz:
        _check_freq(f, rate, "notch frequency")
    x = raw.data
    if highpass_hz is not None:
        b, a = signal.butter(2, highpass_hz, btype="highpass", fs=rate)
        x = signal.filtfilt(b, a, x, axis=-1)
    for f in notch_list_hz:
        b, a = signal.iirnotch(f, NOTCH_Q, fs=rate)
        x = signal.filtfilt(b, a, x, axis=-1)
    return raw.with_data(x)


def epoch_segments(continuous: EegEpoch, duration_s: float = EPOCH_SECONDS,
                   events: Sequence[int] = ()) -> list[EegEpoch]:
    n = int(round(duration_s * continuous.sample_rate_hz))
    out = []
    for ev in events:
        ev = int(ev)
        if ev < 0 or ev + n > continuous.n_samples:
            raise RangeError(f"event at sample {ev} needs {n} samples but the record has {continuous.n_samples}")
        out.append(continuous.with_data(continuous.data[:, ev:ev + n].copy()))
    return out


# ---------------------------------------------------------------- epoch files

_HEADER = struct.Struct("<4sIIId")
_NAME_LEN = struct.Struct("<H")


def encode_epoch(epoch: EegEpoch) -> bytes:
    name = epoch.montage.name.encode("utf-8")
    return b"".join([
        _HEADER.pack(EPOCH_MAGIC, EPOCH_VERSION, epoch.n_channels, epoch.n_samples, float(epoch.sample_rate_hz)),
        _NAME_LEN.pack(len(name)), name,
        epoch.data.astype("<f4").tobytes(),
    ])


def decode_epoch(blob: bytes, montage_dirs: Sequence[str | os.PathLike] = ()) -> EegEpoch:
    if len(blob) < 4 or blob[:4] != EPOCH_MAGIC:
        raise ParseError("not an epoch file (bad magic)")
    if len(blob) < _HEADER.size:
        raise ParseError("truncated epoch file: missing header")
    _, version, n_ch, n_s, rate = _HEADER.unpack_from(blob, 0)
    if version != EPOCH_VERSION:
        raise ParseError(f"unsupported epoch file version {version}")
    off = _HEADER.size
    if len(blob) < off + _NAME_LEN.size:
        raise ParseError("truncated epoch file: missing montage name length")
    (name_len,) = _NAME_LEN.unpack_from(blob, off)
    off += _NAME_LEN.size
    if len(blob) < off + name_len:
        raise ParseError("truncated epoch file: missing montage name")
    try:
        name = blob[off:off + name_len].decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("epoch file montage name is not UTF-8") from None
    off += name_len
    need = n_ch * n_s * 4
    if len(blob) < off + need:
        raise ParseError(f"truncated epoch file: missing sample data ({len(blob) - off} of {need} bytes)")
    if len(blob) > off + need:
        raise ParseError("epoch file has trailing bytes after sample data")
    data = np.frombuffer(blob, dtype="<f4", count=n_ch * n_s, offset=off).reshape(n_ch, n_s).astype(np.float64)
    montage = load_montage(name, montage_dirs)
    if len(montage) != n_ch:
        raise ParseError(f"epoch file has {n_ch} channels but montage {name!r} has {len(montage)}")
    return EegEpoch(montage, rate, data)


def atomic_write_bytes(path: str | os.PathLike, blob: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial output."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_epoch(path: str | os.PathLike, epoch: EegEpoch) -> None:
    """Write an epoch file; custom montages also get a ``<name>.montage`` sidecar."""
    path = Path(path)
    if not is_builtin(epoch.montage.name):
        side = path.parent / f"{epoch.montage.name}{MONTAGE_SUFFIX}"
        if not side.exists():
            atomic_write_bytes(side, format_montage(epoch.montage).encode("utf-8"))
    atomic_write_bytes(path, encode_epoch(epoch))


def read_epoch(path: str | os.PathLike, montage_dirs: Sequence[str | os.PathLike] = ()) -> EegEpoch:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read epoch file {path}: {exc.strerror}") from None
    return decode_epoch(blob, [path.parent, *montage_dirs])


def synth_pairs(seeds: Sequence[int], hr_montage: Montage, factor: int, relative: bool = True,
                abnormal: bool = False, **synth_kwargs) -> list[tuple[EegEpoch, EegEpoch]]:
    """One synthetic (LR, HR) pair per seed, LR taken from HR by channel selection."""
    pairs = []
    for s in seeds:
        hr = synth_epoch(int(s), hr_montage, abnormal=abnormal, **synth_kwargs)
        lr, _ = downsample_channels(hr, factor, relative=relative)
        pairs.append((lr, hr))
    return pairs
