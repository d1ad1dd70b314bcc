"""Training (noise-prediction objective) and conditional sampling, LR epoch -> SR epoch."""
from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .container import read_container, write_container
from .data import EegEpoch, Montage, read_epoch
from .evaluation import metrics
from .errors import ConfigError, DataError, DimensionError, NumericError, ParseError
from .mae import MaskedAutoencoder
from .mtd import MtdConfig, NoisePredictor, TokenLayout
from .numerics import Adam, ParamStore, Tensor
from .schedule import NoiseSchedule, SAMPLING_MODES, build_schedule, forward_diffuse_batch, reverse_step
from .stc import ConditionEncoder, StcConfig, default_patch_len

LATENT_MODES = ("none", "mae")
HR_SUFFIX = ".hr.stad"
LR_SUFFIX = ".lr.stad"


@dataclass
class TrainConfig:
    """Every training setting. Defaults are the desk-scale configuration;
    :meth:`paper_scale` gives the full-scale batch/epoch/step counts."""
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 50
    max_steps: int = 0  # 0: no cap beyond epochs
    steps: int = 100  # diffusion steps T
    schedule: str = "cosine"
    seed: int = 0
    latent_space: str = "none"
    window_length: int = 0  # latent bypass token width; 0 picks the largest divisor <= 48 samples
    validate_every: int = 0  # epochs between diagnostic validation decodes; 0 disables
    sample_mode: str = "standard"
    sample_clip: float = 1.05  # clean-latent clip, as a multiple of the largest training |z_0|; 0 disables
    stc_patch_len: int = 0  # 0 picks ~9 patches
    stc_dim: int = 64
    stc_heads: int = 4
    mtd_kernels: tuple[int, ...] = (3, 5, 7, 9)
    mtd_blocks: int = 2
    mtd_heads: int = 16
    mtd_dim: int = 64
    mtd_ffn_mult: int = 4

    def __post_init__(self):
        self.mtd_kernels = tuple(int(k) for k in self.mtd_kernels)
        for name in ("learning_rate", "batch_size", "epochs", "steps", "stc_dim", "stc_heads",
                     "mtd_blocks", "mtd_heads", "mtd_dim", "mtd_ffn_mult"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 (batch norm runs in train mode)")
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"schedule must be linear or cosine, got {self.schedule!r}")
        if self.latent_space not in LATENT_MODES:
            raise ConfigError(f"latent_space must be one of {LATENT_MODES}, got {self.latent_space!r}")
        if self.sample_mode not in SAMPLING_MODES:
            raise ConfigError(f"sample_mode must be one of {SAMPLING_MODES}")
        if min(self.max_steps, self.window_length, self.stc_patch_len, self.validate_every, self.sample_clip) < 0:
            raise ConfigError("step caps, window and patch lengths cannot be negative")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        return cls(**{"batch_size": 32, "epochs": 300, "steps": 1000, **overrides})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["mtd_kernels"] = list(self.mtd_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------- config files

def _field_types() -> dict[str, type]:
    return {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def coerce_value(key: str, raw: str):
    """Parse a text value for ``key`` according to the TrainConfig field type."""
    types = _field_types()
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    kind = str(types[key])
    text = raw.strip().strip("\"'")
    try:
        if "tuple" in kind:
            items = [v for v in re.split(r"[,\s]+", text.strip("[]()")) if v]
            return tuple(int(v) for v in items)
        if kind in ("int", "<class 'int'>"):
            return int(text)
        if kind in ("float", "<class 'float'>"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return text


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``[section]`` headers prefix keys as ``section.key``."""
    out: dict = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if section:
            key = f"{section}.{key}"
        field_name = key.replace(".", "_")
        out[field_name] = coerce_value(field_name, value)
    return out


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> TrainConfig:
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(parse_config_text(text))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return TrainConfig.from_dict(values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        key = k.replace("stc_", "stc.", 1).replace("mtd_", "mtd.", 1)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- model

def default_bypass_window(n_samples: int, widest: int = 48) -> int:
    """Largest divisor of ``n_samples`` that is at most ``widest`` samples."""
    return max(w for w in range(1, min(widest, n_samples) + 1) if n_samples % w == 0)


@dataclass
class Geometry:
    hr_montage: Montage
    lr_montage: Montage
    n_samples: int
    sample_rate_hz: float

    def to_dict(self) -> dict:
        def m(mt: Montage):
            return {"name": mt.name, "labels": list(mt.labels), "positions": mt.positions.tolist()}
        return {"hr_montage": m(self.hr_montage), "lr_montage": m(self.lr_montage),
                "n_samples": self.n_samples, "sample_rate_hz": self.sample_rate_hz}

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        def m(x):
            return Montage(x["name"], tuple(x["labels"]), np.array(x["positions"], dtype=np.float64))
        return cls(m(d["hr_montage"]), m(d["lr_montage"]), int(d["n_samples"]), float(d["sample_rate_hz"]))


class StadmModel:
    """Condition encoder + denoiser (trainable) around a frozen latent codec.

    In bypass mode (``latent_space = none``) the latent tokens are the HR
    signal windows themselves, scaled by ``signal_scale``.
    """

    def __init__(self, cfg: TrainConfig, geometry: Geometry, signal_scale: float = 1.0,
                 codec: MaskedAutoencoder | None = None, latent_bound: float | None = None):
        self.cfg = cfg
        self.geometry = geometry
        self.signal_scale = float(signal_scale)
        self.latent_bound = latent_bound  # largest |z_0| over the training set
        self.schedule: NoiseSchedule = build_schedule(cfg.schedule, cfg.steps)
        n = geometry.n_samples
        c_hr = len(geometry.hr_montage)
        if cfg.latent_space == "mae":
            if codec is None:
                raise ConfigError("latent_space = mae needs a pretrained codec checkpoint")
            if (codec.cfg.n_channels, codec.cfg.n_samples) != (c_hr, n):
                raise DataError(f"codec expects {codec.cfg.n_channels} x {codec.cfg.n_samples} epochs, "
                                f"data is {c_hr} x {n}")
            self.window_length = codec.cfg.window_length
            d_lat = codec.cfg.d_lat
        else:
            codec = None
            self.window_length = cfg.window_length or default_bypass_window(n)
            if n % self.window_length:
                raise ConfigError(f"window_length {self.window_length} does not divide {n} samples")
            d_lat = self.window_length
        self.codec = codec
        self.n_windows = n // self.window_length
        self.params = ParamStore()
        patch = cfg.stc_patch_len or default_patch_len(n)
        self.stc = ConditionEncoder(StcConfig(patch_len=patch, dim=cfg.stc_dim, heads=cfg.stc_heads,
                                              seed=cfg.seed * 7 + 1), self.params)
        self.mtd = NoisePredictor(MtdConfig(d_lat=d_lat, d_cond=cfg.stc_dim, dim=cfg.mtd_dim,
                                            heads=cfg.mtd_heads, kernels=cfg.mtd_kernels,
                                            blocks=cfg.mtd_blocks, ffn_mult=cfg.mtd_ffn_mult,
                                            seed=cfg.seed * 7 + 2), self.params)
        self.layout = TokenLayout.grid(geometry.hr_montage.positions, self.n_windows)
        self.lr_coords = geometry.lr_montage.positions

    @property
    def clip(self) -> float | None:
        if not self.cfg.sample_clip or self.latent_bound is None:
            return None
        return self.cfg.sample_clip * self.latent_bound

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (len(self.layout), self.mtd.cfg.d_lat)

    def encode_hr(self, hr: np.ndarray) -> np.ndarray:
        """``[B, C_hr, N]`` microvolts -> ``[B, L, d_lat]`` clean latents z_0."""
        if self.codec is not None:
            return self.codec.encode_tokens(self.codec.tokens(hr))
        b, c, n = hr.shape
        return hr.reshape(b, c * self.n_windows, self.window_length) / self.signal_scale

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        if self.codec is not None:
            return self.codec.decode_array(z)
        b = z.shape[0]
        return z.reshape(b, len(self.geometry.hr_montage), self.geometry.n_samples) * self.signal_scale

    def condition(self, lr: np.ndarray, training: bool) -> Tensor:
        return self.stc(np.asarray(lr) / self.signal_scale, self.lr_coords, training)

    def predict_noise(self, z_t, t, c: Tensor, training: bool = False) -> Tensor:
        # the skip path is scaled by sqrt(1 - abar_t), the noise share of z_t
        abar = self.schedule.alpha_bar[np.atleast_1d(t) - 1]
        return self.mtd.predict_noise(z_t, t, c, self.layout, training,
                                      skip_coef=np.sqrt(1.0 - abar), out_coef=np.sqrt(abar))


# ---------------------------------------------------------------- training

def training_step(model: StadmModel, lr: np.ndarray, hr: np.ndarray, rng: np.random.Generator,
                  optimizer: Adam | None = None) -> float:
    """One noise-prediction step on a batch of LR/HR pairs (``[B, C, N]`` arrays).

    Draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` per example, scores the
    denoiser with mean squared error and, when an optimizer is given, applies
    one update. The codec is read-only here.
    """
    if lr.ndim != 3 or hr.ndim != 3 or lr.shape[0] != hr.shape[0] or lr.shape[2] != hr.shape[2]:
        raise DimensionError(f"unpaired batch shapes {lr.shape} and {hr.shape}")
    sched = model.schedule
    b = hr.shape[0]
    z0 = model.encode_hr(hr)
    t = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(z0.shape)
    z_t = forward_diffuse_batch(z0, t, eps, sched)
    model.params.zero_grad()
    c = model.condition(lr, training=True)
    eps_hat = model.predict_noise(Tensor(z_t), t, c, training=True)
    loss = nx.mse(eps_hat, eps)
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("training loss is not finite")
    loss.backward()
    if optimizer is not None:
        optimizer.step()
    return value


@dataclass
class PairSet:
    names: list[str]
    lr: np.ndarray  # P x C_lr x N
    hr: np.ndarray  # P x C_hr x N
    geometry: Geometry

    def __len__(self) -> int:
        return len(self.names)


def pairs_from_epochs(pairs: Sequence[tuple[EegEpoch, EegEpoch]], names: Sequence[str] | None = None) -> PairSet:
    """Validate and stack (lr, hr) epoch pairs."""
    if not pairs:
        raise DataError("no LR/HR pairs")
    lr0, hr0 = pairs[0]
    for lr, hr in pairs:
        if not (lr.montage.same_layout(lr0.montage) and hr.montage.same_layout(hr0.montage)):
            raise DataError("all pairs must share the same LR and HR montages")
        if lr.sample_rate_hz != hr.sample_rate_hz or lr.n_samples != hr.n_samples:
            raise DataError("paired epochs must share sample rate and duration")
        if lr.sample_rate_hz != lr0.sample_rate_hz or lr.n_samples != lr0.n_samples:
            raise DataError("all pairs must share sample rate and duration")
    geometry = Geometry(hr0.montage, lr0.montage, hr0.n_samples, hr0.sample_rate_hz)
    names = list(names) if names is not None else [f"pair{i:04d}" for i in range(len(pairs))]
    return PairSet(names, np.stack([p[0].data for p in pairs]), np.stack([p[1].data for p in pairs]), geometry)


def load_pairs(data_dir: str | os.PathLike) -> PairSet:
    """``<name>.lr.stad`` / ``<name>.hr.stad`` files in one directory, sorted by name."""
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    hr_files = {p.name[:-len(HR_SUFFIX)]: p for p in d.glob(f"*{HR_SUFFIX}")}
    lr_files = {p.name[:-len(LR_SUFFIX)]: p for p in d.glob(f"*{LR_SUFFIX}")}
    if not hr_files and not lr_files:
        raise DataError(f"no epoch pairs in {d}")
    missing = sorted(set(hr_files) ^ set(lr_files))
    if missing:
        raise DataError(f"unpaired epoch files in {d}: {missing}")
    names = sorted(hr_files)
    return pairs_from_epochs([(read_epoch(lr_files[n]), read_epoch(hr_files[n])) for n in names], names)


@dataclass
class Checkpoint:
    config: TrainConfig
    geometry: Geometry
    signal_scale: float
    arrays: dict[str, np.ndarray]
    loss_trace: list[float] = field(default_factory=list)
    codec: MaskedAutoencoder | None = None
    latent_bound: float | None = None

    def model(self) -> StadmModel:
        m = StadmModel(self.config, self.geometry, self.signal_scale, self.codec, self.latent_bound)
        m.params.load_arrays(self.arrays)
        return m

    def save(self, path: str | os.PathLike) -> None:
        header = {
            "kind": "stadm",
            "config": self.config.to_dict(),
            "geometry": self.geometry.to_dict(),
            "signal_scale": self.signal_scale,
            "latent_bound": self.latent_bound,
            "schedule": {"kind": self.config.schedule, "T": self.config.steps},
            "codec": None,
        }
        arrays = dict(self.arrays)
        arrays["trace/loss"] = np.asarray(self.loss_trace, dtype=np.float64)
        if self.codec is not None:
            header["codec"] = {"kind": "mae", "config": dataclasses.asdict(self.codec.cfg)}
            arrays.update({f"codec/{k}": v for k, v in self.codec.params.to_arrays().items()})
        write_container(path, header, arrays)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        header, arrays = read_container(path)
        if header.get("kind") != "stadm":
            raise ParseError(f"{path} is not a super-resolution checkpoint")
        codec = None
        if header.get("codec"):
            codec_arrays = {k[len("codec/"):]: v for k, v in arrays.items() if k.startswith("codec/")}
            codec = MaskedAutoencoder.from_container(header["codec"], codec_arrays)
        own = {k: v for k, v in arrays.items() if not k.startswith(("codec/", "trace/"))}
        return cls(TrainConfig.from_dict(header["config"]), Geometry.from_dict(header["geometry"]),
                   float(header["signal_scale"]), own, arrays.get("trace/loss", np.zeros(0)).tolist(), codec,
                   header.get("latent_bound"))


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[i:i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def train_pairs(cfg: TrainConfig, pairs: PairSet, codec: MaskedAutoencoder | None = None,
                log: Callable[[str], None] | None = None) -> Checkpoint:
    """Run ``epochs`` passes of shuffled mini-batches (or stop at ``max_steps``).

    Batch order comes from ``(seed, epoch)`` and the noise/timestep draws of
    step ``k`` from ``(seed, k)``, so a run is fully determined by its config
    and data.
    """
    if len(pairs) < 2:
        raise DataError("training needs at least two pairs (batch norm statistics)")
    if cfg.latent_space == "mae" and codec is None:
        raise ConfigError("latent_space = mae needs a codec checkpoint (--mae)")
    scale = float(np.sqrt(np.mean(pairs.hr ** 2))) or 1.0
    model = StadmModel(cfg, pairs.geometry, scale, codec)
    model.latent_bound = float(np.abs(model.encode_hr(pairs.hr)).max())
    opt = Adam(model.params, lr=cfg.learning_rate)
    trace: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        first = step
        order_rng = np.random.default_rng([cfg.seed, 0, epoch])
        # a dataset smaller than one batch is repeated; each copy draws its own t and noise
        reps = -(-cfg.batch_size // len(pairs))
        order = np.concatenate([order_rng.permutation(len(pairs)) for _ in range(reps)])
        for idx in _batches(order, cfg.batch_size):
            rng = np.random.default_rng([cfg.seed, 1, step])
            trace.append(training_step(model, pairs.lr[idx], pairs.hr[idx], rng, opt))
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                break
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} step {step} loss {np.mean(trace[first:]):.5f}")
        if cfg.validate_every and (epoch + 1) % cfg.validate_every == 0 and log:
            sr = sample_arrays(model, pairs.lr[:1], [cfg.seed])[0]
            log(f"epoch {epoch + 1} validation decode: PCC {metrics(pairs.hr[0], sr).pcc:.4f}")
        if cfg.max_steps and step >= cfg.max_steps:
            break
    return Checkpoint(cfg, pairs.geometry, scale, model.params.to_arrays(), trace, codec, model.latent_bound)


def train(cfg: TrainConfig, data_dir: str | os.PathLike, codec: MaskedAutoencoder | None = None,
          log: Callable[[str], None] | None = None) -> Checkpoint:
    return train_pairs(cfg, load_pairs(data_dir), codec, log)


# ---------------------------------------------------------------- sampling

def sample_arrays(model: StadmModel, lr: np.ndarray, seeds: Sequence[int], mode: str | None = None) -> np.ndarray:
    """Reverse chain for a batch of LR arrays ``[B, C_lr, N]``; one RNG stream per example."""
    mode = mode or model.cfg.sample_mode
    if mode not in SAMPLING_MODES:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    lr = np.asarray(lr, dtype=np.float64)
    if lr.shape[1:] != (len(model.geometry.lr_montage), model.geometry.n_samples):
        raise DimensionError(f"LR batch shape {lr.shape[1:]} does not match the trained geometry")
    sched = model.schedule
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    if len(rngs) != lr.shape[0]:
        raise ConfigError("one seed per LR epoch")
    shape = model.latent_shape
    z = np.stack([r.standard_normal(shape) for r in rngs])
    with nx.no_grad():
        c = model.condition(lr, training=False)
        for t in range(sched.T, 0, -1):
            eps_hat = model.predict_noise(Tensor(z), t, c, training=False).data
            noise = np.stack([r.standard_normal(shape) for r in rngs]) if (t > 1 and mode == "standard") else None
            z = reverse_step(z, eps_hat, t, sched, noise, mode, clip=model.clip if mode == "standard" else None)
    out = model.decode_latent(z)
    if not np.isfinite(out).all():
        raise NumericError(f"sampling in {mode} mode produced non-finite values")
    return out


def _check_lr(model: StadmModel, lr: EegEpoch) -> None:
    if not lr.montage.same_layout(model.geometry.lr_montage):
        raise DataError(f"LR montage {lr.montage.name!r} differs from the training LR montage "
                        f"{model.geometry.lr_montage.name!r}")
    if lr.n_samples != model.geometry.n_samples or lr.sample_rate_hz != model.geometry.sample_rate_hz:
        raise DataError("LR epoch duration or sample rate differs from training data")


def super_resolve(checkpoint: Checkpoint | StadmModel, lr: EegEpoch, seed: int, mode: str = "standard") -> EegEpoch:
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    _check_lr(model, lr)
    data = sample_arrays(model, lr.data[None], [seed], mode)[0]
    return EegEpoch(model.geometry.hr_montage, lr.sample_rate_hz, data)


def super_resolve_many(checkpoint: Checkpoint | StadmModel, lrs: Sequence[EegEpoch], seeds: Sequence[int],
                       mode: str = "standard", chunk: int = 32) -> list[EegEpoch]:
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    for lr in lrs:
        _check_lr(model, lr)
    out: list[EegEpoch] = []
    for i in range(0, len(lrs), chunk):
        part = lrs[i:i + chunk]
        data = sample_arrays(model, np.stack([e.data for e in part]), seeds[i:i + chunk], mode)
        out += [EegEpoch(model.geometry.hr_montage, e.sample_rate_hz, d) for e, d in zip(part, data)]
    return out
