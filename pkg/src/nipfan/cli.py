"""Command-line interface.

Exit codes:
  0  success
  2  usage error (bad flags)
  3  input error (bad config, shapes, missing files)
  4  integrity or version error in a container file
  5  training error (divergence)
  6  gradient check failure
  7  patch sampling error
  8  parameter-count assertion failure
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ContractError, InputError, ShapeError

EXIT_OK = 0
EXIT_INPUT = 3
EXIT_INTEGRITY = 4
EXIT_TRAINING = 5
EXIT_GRADCHECK = 6
EXIT_SAMPLING = 7
EXIT_COUNT = 8

FULL_FAN_PARAMS = 1_341_990


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_data(args) -> int:
    from .io import builtin_sources, read_image_dir, save_dataset
    from .raw import SensorConfig, synth_dataset
    if args.src.startswith("builtin:"):
        sources = builtin_sources(args.src.split(":", 1)[1])
    else:
        sources = read_image_dir(args.src)
    samples = synth_dataset(sources, args.seed, args.count, args.patch, SensorConfig(noise=args.noise))
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def _build_nip(cfg):
    from .nip import inet_init, unet_init
    if cfg.nip.kind == "inet":
        return inet_init(cfg.nip.cfa_order)
    return unet_init(cfg.nip.width, cfg.nip.depth, cfg.seed)


def _checkpoint_cb(out: Path, every: int = 1):
    from .io import save_train_state

    def cb(state):
        if state.epoch % every == 0:
            save_train_state(out / "state.nipc", state)
        (out / "history.csv").write_text(_history(state))
    return cb


def _history(state) -> str:
    from .training import history_csv
    return history_csv(state.history)


def cmd_train_nip(args) -> int:
    from .config import load_config
    from .io import load_samples, load_train_state, save_checkpoint
    from .raw import SensorConfig
    from .training import train_nip
    cfg = load_config(args.config)
    cfg.train.mode = "nip"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sensor = SensorConfig(cfa_order=cfg.nip.cfa_order, noise=cfg.data.noise)
    train = load_samples(cfg.data.train, sensor)
    val = load_samples(cfg.data.val, sensor)
    resume = load_train_state(args.resume) if args.resume else None
    state = train_nip(cfg.train, train, _build_nip(cfg), val, resume=resume, on_epoch=_checkpoint_cb(out))
    save_checkpoint(out / "nip.nipc", state.nip, {"config": cfg.to_dict(), "epochs": state.epoch})
    (out / "history.csv").write_text(_history(state))
    last = state.history[-1] if state.history else None
    if last is not None:
        print(f"epochs {state.epoch}  val psnr {last.psnr:.2f} dB  ssim {last.ssim:.4f}")
    return EXIT_OK


def cmd_train_joint(args) -> int:
    from .config import load_config
    from .fan import fan_init
    from .io import load_checkpoint, load_samples, load_train_state, save_checkpoint
    from .metrics import confusion
    from .raw import SensorConfig
    from .training import classify, train_joint
    cfg = load_config(args.config)
    cfg.train.mode = args.mode
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nip, _, _ = load_checkpoint(args.nip_checkpoint)
    sensor = SensorConfig(cfa_order=cfg.nip.cfa_order, noise=cfg.data.noise)
    train = load_samples(cfg.data.train, sensor)
    val = load_samples(cfg.data.val, sensor)
    resume = load_train_state(args.resume) if args.resume else None
    channel = cfg.channel.build()
    state = train_joint(cfg.train, train, nip, fan_init(cfg.fan.width, cfg.seed), val, channel,
                        resume=resume, on_epoch=_checkpoint_cb(out))
    save_checkpoint(out / "nip.nipc", state.nip, {"config": cfg.to_dict(), "mode": args.mode})
    save_checkpoint(out / "fan.nipc", state.fan, {"config": cfg.to_dict(), "mode": args.mode})
    (out / "history.csv").write_text(_history(state))
    if state.val_stacks is not None:
        labels, preds = classify(state.nip, state.fan, state.val_stacks, channel, cfg.train.channel, cfg.train.clip)
        cm = confusion(labels, preds)
        (out / "confusion.csv").write_text(cm.to_csv())
        (out / "confusion.txt").write_text(cm.to_text() + "\n")
        print(cm.to_text())
    return EXIT_OK


def cmd_develop(args) -> int:
    from .io import load_checkpoint, load_sample, write_image
    from .nip import develop, nip_kind
    from .autodiff import no_grad
    params, _, _ = load_checkpoint(args.checkpoint)
    if nip_kind(params) != args.nip:
        raise InputError(f"checkpoint holds a {nip_kind(params)} model, not {args.nip}")
    sample = load_sample(args.input)
    with no_grad():
        rgb = develop(params, sample.stack, clip="hard").data
    write_image(args.out, rgb)
    print(f"wrote {rgb.shape[1]}x{rgb.shape[0]} image to {args.out}")
    return EXIT_OK


def cmd_jpeg_validate(args) -> int:
    from . import autodiff as ad
    from .djpeg import RoundingMode, djpeg_forward, reference_jpeg
    from .metrics import format_psnr, psnr
    qualities = [int(q) for q in args.quality.split(",")]
    modes = [RoundingMode.parse(m) for m in args.mode.split(",")]
    rng = np.random.default_rng(args.seed)
    images = rng.random((args.count, args.size, args.size, 3))
    rows = []
    with ad.precision(np.float64), ad.no_grad():
        for q in qualities:
            refs = np.stack([reference_jpeg(im, q) for im in images])
            for mode in modes:
                out = djpeg_forward(ad.tensor(images), q, mode).data
                dev = float(np.abs(out - refs).max()) * 255
                rows.append([q, str(mode), format_psnr(psnr(out, refs)), f"{dev:.6f}"])
    _write_csv(args.out, ["quality", "mode", "psnr_db", "max_abs_dev_255"], rows)
    for r in rows:
        print(",".join(str(v) for v in r))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite
    names = [args.op] if args.op else None
    results = gradsuite.run(names, eps=args.eps, tolerance=args.tol)
    failed = 0
    for name, (err, ok) in results.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name:24s} rel err {err:.3e}")
        failed += not ok
    print(f"{len(results) - failed}/{len(results)} passed")
    return EXIT_OK if not failed else EXIT_GRADCHECK


def cmd_evaluate(args) -> int:
    from .channel import ChannelConfig
    from .djpeg import RoundingMode
    from .io import load_checkpoint, load_samples
    from .metrics import confusion
    from .training import classify, sample_patches
    fan, _, _ = load_checkpoint(args.fan)
    nip, _, _ = load_checkpoint(args.nip)
    data = load_samples(args.data)
    stacks, _ = sample_patches(data, args.patches, args.patch, np.random.default_rng(args.seed))
    channel = ChannelConfig(args.downsample, args.jpeg_quality, RoundingMode.parse(args.rounding))
    labels, preds = classify(nip, fan, stacks, channel, not args.no_channel)
    cm = confusion(labels, preds)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(cm.to_csv())
    print(cm.to_text())
    return EXIT_OK


def cmd_info(args) -> int:
    from .fan import fan_width
    from .io import load_checkpoint
    params, meta, kind = load_checkpoint(args.checkpoint)
    total = params.count()
    print(f"kind: {kind}")
    for name, t in params.items():
        print(f"  {name:20s} {str(t.shape):22s} {t.size}")
    print(f"parameters: {total}")
    if kind == "fan" and fan_width(params) == 1.0 and total != FULL_FAN_PARAMS:
        print(f"error: full-width FAN should have {FULL_FAN_PARAMS} parameters", file=sys.stderr)
        return EXIT_COUNT
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nipfan", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="synthesize raw training samples from RGB photographs")
    s.add_argument("--src", required=True, help="image directory, or builtin:train / builtin:val")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--patch", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise", type=float, default=0.0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-nip", help="stage 1: fit a NIP to the reference pipeline")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="train-state container to continue from")
    s.set_defaults(func=cmd_train_nip)

    s = sub.add_parser("train-joint", help="stages 2-3: FAN training with frozen (f) or joint (f+n) NIP")
    s.add_argument("--mode", choices=["f", "f+n"], required=True)
    s.add_argument("--nip-checkpoint", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="train-state container to continue from")
    s.set_defaults(func=cmd_train_joint)

    s = sub.add_parser("develop", help="develop a raw sample container into a PNG")
    s.add_argument("--nip", choices=["inet", "unet"], required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_develop)

    s = sub.add_parser("jpeg-validate", help="compare differentiable JPEG against the reference codec")
    s.add_argument("--quality", default="50,80,95", help="comma-separated quality list")
    s.add_argument("--mode", default="exact,sin,harmonic", help="comma-separated rounding modes")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=50)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_jpeg_validate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite (exit 6 on failure)")
    s.add_argument("--op", help="run a single registered check")
    s.add_argument("--eps", type=float, default=1e-6)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("evaluate", help="confusion matrix of a FAN behind a NIP")
    s.add_argument("--fan", required=True)
    s.add_argument("--nip", required=True)
    s.add_argument("--data", required=True, help="sample directory or builtin:val")
    s.add_argument("--out", required=True)
    s.add_argument("--patches", type=int, default=60)
    s.add_argument("--patch", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--downsample", type=int, default=2)
    s.add_argument("--jpeg-quality", type=int, default=50)
    s.add_argument("--rounding", default="sin")
    s.add_argument("--no-channel", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("info", help="parameter counts of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    from .io import IntegrityError, VersionError
    from .nip import TrainingError
    from .training import SamplingError
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (IntegrityError, VersionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingError as e:
        print(f"training error: {e}", file=sys.stderr)
        if e.checkpoint and getattr(args, "out", None):
            from .io import save_checkpoint
            for name, params in e.checkpoint.items():
                save_checkpoint(Path(args.out) / f"last_good_{name}.nipc", params)
        return EXIT_TRAINING
    except SamplingError as e:
        print(f"sampling error: {e}", file=sys.stderr)
        return EXIT_SAMPLING
    except (InputError, ShapeError, ContractError, FileNotFoundError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
