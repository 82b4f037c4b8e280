"""Command-line interface: gradcheck, melspec, synth-data, train, eval, warp-demo."""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import fields

import numpy as np

from .audio import IngestionError, load_wav, mel_spectrogram, window_for_frame, write_mel, write_mel_text
from .config import PipelineConfig, build_config, load_config_file
from .deformation import AffineCoeffSet, affine_warp
from .gradsuite import run_suite
from .image_io import ImageFormatError, read_frames, write_frames, write_pgm
from .metrics import RandomSyncEmbedder, report
from .pipeline import TrainingDiverged, train
from .synth import generate_dataset, render_frame
from .tensor import ContractViolation, Tensor


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", help="key = value config file")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, dest=f.name, action="store_const", const=True,
                                default=None)
        else:
            kind = int if f.type == "int" else float if f.type == "float" else str
            parser.add_argument(flag, dest=f.name, type=kind, default=None, metavar="V")


def _config_from_args(args) -> PipelineConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(PipelineConfig)
        if getattr(args, f.name, None) is not None
    }
    return build_config(file_values, overrides)


def _cmd_gradcheck(args) -> int:
    results = run_suite(seeds=args.seeds)
    failed = False
    for name, err, ok in results:
        print(f"{name:28s} max-rel-err {err:.3e}  {'PASS' if ok else 'FAIL'}")
        failed |= not ok
    return 1 if failed else 0


def _cmd_melspec(args) -> int:
    clip = load_wav(args.wav)
    mel = mel_spectrogram(clip)
    write_mel(args.out, mel)
    if args.text:
        write_mel_text(args.text, mel)
    print(f"{args.wav}: {mel.shape[0]} frames x {mel.shape[1]} bins -> {args.out}")
    return 0


def _cmd_synth_data(args) -> int:
    config = _config_from_args(args)
    audio = load_wav(args.audio).samples if args.audio else None
    dataset = generate_dataset(config, config.samples, audio=audio)
    os.makedirs(args.out, exist_ok=True)
    write_frames(os.path.join(args.out, "frames"), [s.truth_frame for s in dataset.samples])
    write_frames(os.path.join(args.out, "sources"), [s.source_frame for s in dataset.samples])
    from .audio import write_wav

    write_wav(os.path.join(args.out, "audio.wav"), dataset.audio)
    print(f"{len(dataset)} samples over {len(dataset.frames)} frames -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _config_from_args(args)
    audio = load_wav(args.audio).samples if args.audio else None
    dataset = generate_dataset(config, config.samples, audio=audio)
    result = train(config, dataset, out_dir=args.out, quiet=args.quiet)
    print(
        f"trained {result.steps_run} steps (expert {result.phase1_steps}); "
        f"total {result.first_total:.4f} -> {result.last_total:.4f}; "
        f"masked L1 {result.masked_l1:.4f}; ssim {result.mean_ssim:.4f}"
    )
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
        print(f"loss curve: {result.csv_path}")
    return 0


def _cmd_eval(args) -> int:
    generated = read_frames(args.generated)
    reference = read_frames(args.reference)
    mels = None
    embedder = None
    if args.audio:
        mel = mel_spectrogram(load_wav(args.audio))
        mels = []
        for index in range(len(generated)):
            mels.append(window_for_frame(mel, index))
        shape = np.asarray(generated[0]).shape
        embedder = RandomSyncEmbedder(frame_shape=shape, seed=0)
    out = report(generated, reference, mels=mels, embedder=embedder,
                 csv_path=args.out, svg_path=args.plot)
    print(f"frames: {out.frame_count}")
    print(f"psnr: {out.psnr_mean:.4f} dB  ssim: {out.ssim_mean:.4f}  mse: {out.mse_mean:.6f}")
    if out.lse_d is not None:
        print(f"lse-d: {out.lse_d:.4f}  lse-c: {out.lse_c:.4f}")
    print(f"report: {args.out}")
    return 0


def _cmd_warp_demo(args) -> int:
    size = args.size
    frame = render_frame(size, size, mouth_open=0.6)
    gray = frame.mean(axis=0)
    coeffs = AffineCoeffSet(
        Tensor(np.full(1, args.theta)),
        Tensor(np.full(1, args.tx)),
        Tensor(np.full(1, args.ty)),
        Tensor(np.full(1, args.scale)),
    )
    warped = affine_warp(Tensor(gray[None]), coeffs).data[0]
    os.makedirs(args.out, exist_ok=True)
    before = os.path.join(args.out, "before.pgm")
    after = os.path.join(args.out, "after.pgm")
    write_pgm(before, gray)
    write_pgm(after, warped)
    print(f"theta={args.theta} tx={args.tx} ty={args.ty} scale={args.scale}")
    print(f"wrote {before} and {after}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facedub",
        description="Desk-scale audio-driven face dubbing: training, features, metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("melspec", help="log-mel features from a 16-bit PCM WAV")
    p.add_argument("wav")
    p.add_argument("--out", required=True, help="binary mel matrix output")
    p.add_argument("--text", help="optional text dump")
    p.set_defaults(func=_cmd_melspec)

    p = sub.add_parser("synth-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--audio", help="drive mouths from a WAV instead of synthesized tones")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_synth_data)

    p = sub.add_parser("train", help="two-phase training on synthetic scenes")
    p.add_argument("--out", help="directory for checkpoint, loss CSV, and frames")
    p.add_argument("--audio", help="drive the dataset from a WAV")
    p.add_argument("--quiet", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="quality and sync metrics over frame directories")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--audio")
    p.add_argument("--out", required=True, help="per-frame CSV report")
    p.add_argument("--plot", help="optional SVG plot")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("warp-demo", help="emit before/after images for one warp")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--theta", type=float, default=math.pi / 12)
    p.add_argument("--tx", type=float, default=0.1)
    p.add_argument("--ty", type=float, default=0.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.set_defaults(func=_cmd_warp_demo)

    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractViolation, IngestionError, ImageFormatError, TrainingDiverged,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())
