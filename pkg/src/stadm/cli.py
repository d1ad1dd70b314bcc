"""Command-line entry point: ``python -m stadm <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure. Every output file is written atomically.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from . import data as D
from .errors import DataError, StadmError

EXIT_USAGE = 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; usage errors here exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- commands

def cmd_synth(a) -> None:
    montage = D.load_montage(a.montage)
    epoch = D.synth_epoch(a.seed, montage, a.duration, a.rate, a.sources, abnormal=a.abnormal)
    D.write_epoch(a.out, epoch)


def cmd_preprocess(a) -> None:
    raw = D.read_epoch(a.input)
    highpass = None if a.highpass <= 0 else a.highpass
    notches = [] if a.no_notch else (a.notch if a.notch is not None else
                                     [f for f in D.DEFAULT_NOTCHES_HZ if f < raw.sample_rate_hz / 2])
    D.write_epoch(a.out, D.preprocess(raw, highpass, notches))


def cmd_downsample(a) -> None:
    hr = D.read_epoch(a.input)
    lr, _ = D.downsample_channels(hr, a.factor, relative=a.relative)
    D.write_epoch(a.out, lr)


def _epoch_files(directory: str) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    files = sorted(d.glob("*.hr.stad")) or sorted(d.glob("*.stad"))
    if not files:
        raise DataError(f"no epoch files in {d}")
    return files


def cmd_pretrain_mae(a) -> None:
    from .mae import MaeConfig, MaskedAutoencoder, default_window_length, pretrain, signal_scale

    epochs = [D.read_epoch(p) for p in _epoch_files(a.data)]
    first = epochs[0]
    if any(not e.montage.same_layout(first.montage) or e.n_samples != first.n_samples for e in epochs):
        raise DataError("pretraining epochs must share montage and length")
    cfg = MaeConfig(n_channels=first.n_channels, n_samples=first.n_samples,
                    window_length=a.window or default_window_length(first.n_samples),
                    mask_ratio=a.mask_ratio, signal_scale=signal_scale(epochs), seed=a.seed)
    model = MaskedAutoencoder(cfg)
    trace = pretrain(model, epochs, a.steps, lr=a.lr, seed=a.seed)
    _log(f"masked loss: first {trace[0]:.5f} last {trace[-1]:.5f}")
    model.save(a.out, {"montage": first.montage.name})


def _train_overrides(a) -> dict:
    return {
        "seed": a.seed, "learning_rate": a.lr, "batch_size": a.batch_size, "epochs": a.epochs,
        "max_steps": a.max_steps, "steps": a.steps, "schedule": a.schedule,
        "latent_space": a.latent_space,
    }


def cmd_train(a) -> None:
    from .mae import MaskedAutoencoder
    from .pipeline import load_config, train

    overrides = _train_overrides(a)
    if a.mae and a.latent_space is None:
        overrides["latent_space"] = "mae"
    cfg = load_config(a.config, overrides)
    codec = MaskedAutoencoder.load(a.mae) if a.mae else None
    ckpt = train(cfg, a.data, codec, log=_log if a.verbose else None)
    ckpt.save(a.out)
    _log(f"trained {len(ckpt.loss_trace)} steps, final loss {ckpt.loss_trace[-1]:.5f}")


def cmd_sample(a) -> None:
    from .pipeline import Checkpoint, super_resolve

    ckpt = Checkpoint.load(a.ckpt)
    lr = D.read_epoch(a.input)
    D.write_epoch(a.out, super_resolve(ckpt, lr, a.seed, a.mode))


def cmd_eval(a) -> None:
    from .evaluation import evaluate_run
    from .pipeline import Checkpoint

    text = evaluate_run(Checkpoint.load(a.ckpt), a.data, seed=a.seed, mode=a.mode, out=a.out)
    if a.out is None:
        sys.stdout.write(text)


def cmd_psd(a) -> None:
    from .evaluation import band_psd, format_band_csv

    epoch = D.read_epoch(a.input)
    D.atomic_write_bytes(a.out, format_band_csv(epoch, band_psd(epoch)).encode("utf-8"))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stadm", description="Diffusion-based spatial super-resolution of multichannel epochs.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic epoch")
    s.add_argument("--seed", type=int, required=True, help="random seed")
    s.add_argument("--montage", default="synthetic-256", help="built-in name or .montage file")
    s.add_argument("--duration", type=float, default=D.EPOCH_SECONDS, help="seconds")
    s.add_argument("--rate", type=float, default=D.DESK_RATE_HZ, help="sample rate in Hz")
    s.add_argument("--sources", type=int, default=3, help="number of dipole-like sources")
    s.add_argument("--abnormal", action="store_true", help="add a strong beta-band source")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="high-pass and notch filter an epoch")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--highpass", type=float, default=D.DEFAULT_HIGHPASS_HZ, help="cutoff in Hz; 0 disables")
    s.add_argument("--notch", type=_floats, default=None, help="comma-separated notch frequencies in Hz")
    s.add_argument("--no-notch", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("downsample", help="keep a channel subset (LR epoch from HR)")
    s.add_argument("--factor", type=int, required=True, choices=sorted(D.SCALING_CHANNELS))
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--relative", action="store_true", help="divide the current channel count instead")
    s.set_defaults(func=cmd_downsample)

    s = sub.add_parser("pretrain-mae", help="pretrain the masked-autoencoder codec")
    s.add_argument("--data", required=True, help="directory of HR epoch files")
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int, default=1000, help="optimizer steps")
    s.add_argument("--lr", type=float, default=2e-3, help="Adam learning rate")
    s.add_argument("--mask-ratio", type=float, default=0.5, help="fraction of tokens hidden")
    s.add_argument("--window", type=int, default=0, help="samples per token; 0 chooses")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.set_defaults(func=cmd_pretrain_mae)

    s = sub.add_parser("train", help="train the condition encoder and denoiser")
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--data", required=True, help="directory of <name>.lr.stad / <name>.hr.stad pairs")
    s.add_argument("--mae", help="codec checkpoint (implies latent_space = mae)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, help="random seed")
    s.add_argument("--lr", type=float, help="Adam learning rate")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--epochs", type=int, help="passes over the training pairs")
    s.add_argument("--max-steps", type=int, help="stop after this many optimizer steps (0: no cap)")
    s.add_argument("--steps", type=int, help="diffusion steps T")
    s.add_argument("--schedule", choices=["linear", "cosine"])
    s.add_argument("--latent-space", choices=["none", "mae"])
    s.add_argument("--verbose", action="store_true", help="log per-epoch loss to standard error")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="super-resolve one LR epoch")
    s.add_argument("--ckpt", required=True, help="trained checkpoint")
    s.add_argument("--in", dest="input", required=True, help="LR epoch file")
    s.add_argument("--seed", type=int, required=True, help="sampling seed")
    s.add_argument("--mode", choices=["standard", "paper_literal"], default="standard")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="score super-resolved test pairs")
    s.add_argument("--ckpt", required=True, help="trained checkpoint")
    s.add_argument("--data", required=True, help="directory of test pairs")
    s.add_argument("--out", help="CSV path (default: standard output)")
    s.add_argument("--seed", type=int, default=0, help="sampling seed of the first pair; pair i uses seed + i")
    s.add_argument("--mode", choices=["standard", "paper_literal"], default="standard")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("psd", help="band powers per channel as CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_psd)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _log(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        args.func(args)
    except StadmError as exc:
        _log(f"{args.command}: {exc}")
        return exc.exit_code
    except OSError as exc:
        _log(f"{args.command}: {exc}")
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
