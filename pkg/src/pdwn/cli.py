"""Command-line interface.

Exit status: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import imageio, synth, viz
from .ablation import SUITES, run_ablation
from .config import ArchConfig, ConfigError
from .model import PDWN
from .synth import Sample
from .tensor import Tensor, no_grad
from .train import Divergence, TrainConfig, curve_to_csv, score, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers


def pad_to_multiple(frames: list[np.ndarray], multiple: int) -> tuple[list[np.ndarray], tuple[int, int]]:
    """Edge-replicate (C, H, W) frames on the bottom/right up to a multiple."""
    _, h, w = frames[0].shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return frames, (0, 0)
    return [np.pad(f, ((0, 0), (0, ph), (0, pw)), mode="edge") for f in frames], (ph, pw)


def interpolate_frames(model: PDWN, frames: list[np.ndarray]):
    """Middle frame (3, H, W) for inputs in temporal order, any size."""
    padded, pad = pad_to_multiple(frames, model.config.size_multiple)
    _, h, w = frames[0].shape
    with no_grad():
        out, diag = model([Tensor(f[None], dtype=model.dtype) for f in padded])
    diag.pad = pad
    return np.clip(out.data[0, :, :h, :w], 0.0, 1.0), diag


def load_sequences(root) -> list[tuple[str, Sample]]:
    out = []
    for d in imageio.sequence_dirs(root):
        frames, target = imageio.read_sequence(d)
        out.append((d.name, Sample(tuple(frames), target)))
    if not out:
        raise UsageError(f"{root}: no sequence directories (im1.ppm ..) found")
    return out


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    arch = ArchConfig.from_text(_read_text(args.config)) if args.config else ArchConfig()
    tcfg = TrainConfig.from_text(_read_text(args.train_config)) if args.train_config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "seed") if getattr(args, k) is not None}
    if overrides:
        tcfg = dataclasses.replace(tcfg, **overrides)
    named = load_sequences(args.data)
    samples = [s for _, s in named]
    frames = len(samples[0].frames)
    if frames != arch.input_frames:
        raise ConfigError(f"data has {frames} input frames per sequence but input_frames = {arch.input_frames}")
    for name, s in named:
        if s.middle.shape[1] % arch.size_multiple or s.middle.shape[2] % arch.size_multiple:
            raise ConfigError(f"{name}: size {s.middle.shape[1:]} is not a multiple of {arch.size_multiple}")

    start, optimizer = 0, None
    if args.resume:
        model, optimizer, stored = ckpt_io.load_checkpoint(args.resume, arch)
        start = stored.step
    else:
        model = PDWN(arch, seed=tcfg.seed)

    out = Path(args.out)
    log_every = max(1, args.log_every)

    def progress(rec):
        if rec.step % log_every == 0:
            print(f"step {rec.step} epoch {rec.epoch} {rec.phase} loss {rec.loss:.6f}", flush=True)

    try:
        result = train(model, samples, tcfg, optimizer=optimizer, start_step=start, progress=progress)
        status = EXIT_OK
    except Divergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        result, status = exc.result, EXIT_NUMERICAL
    ckpt_io.save_checkpoint(out, result.model, result.optimizer, result.step, tcfg.to_text())
    Path(f"{out}.loss.csv").write_text(curve_to_csv(result.curve))
    if result.curve:
        viz.plot_loss_curve(result.curve, f"{out}.loss.png")
    print(f"wrote {out} (step {result.step})")
    return status


def cmd_interpolate(args) -> int:
    model, _, _ = ckpt_io.load_checkpoint(args.checkpoint)
    if len(args.frames) not in (2, 4):
        raise UsageError(f"--frames takes 2 or 4 files, got {len(args.frames)}")
    if len(args.frames) != model.config.input_frames:
        raise ConfigError(f"checkpoint expects {model.config.input_frames} input frames, "
                          f"got {len(args.frames)} (config mismatch: input_frames)")
    frames = [imageio.read_frame(p) for p in args.frames]
    if len({f.shape for f in frames}) != 1:
        raise UsageError("input frames differ in size")
    if len(frames) == 4:
        # given as f0 f2 f-1 f3; the model takes temporal order
        frames = [frames[2], frames[0], frames[1], frames[3]]
    middle, diag = interpolate_frames(model, frames)
    imageio.write_frame(args.out, middle)
    _, h, w = middle.shape
    if args.alpha:
        viz.visualize_alpha(diag.alpha.data[0, 0, :h, :w], args.alpha)
    if args.offsets:
        stem = Path(args.offsets)
        stem.mkdir(parents=True, exist_ok=True)
        for (to0, to2), est in zip(diag.mean_offsets(), diag.estimates):
            viz.visualize_offsets(to0, stem / f"scale{est.scale}_to_past.ppm")
            viz.visualize_offsets(to2, stem / f"scale{est.scale}_to_future.ppm")
    if diag.pad != (0, 0):
        print(f"padded by {diag.pad} (rows, cols) and cropped back")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = ckpt_io.load_checkpoint(args.checkpoint)
    named = load_sequences(args.dir)
    for name, s in named:
        if len(s.frames) != model.config.input_frames:
            raise ConfigError(f"{name}: {len(s.frames)} input frames, checkpoint expects "
                              f"{model.config.input_frames} (config mismatch: input_frames)")

    def run(item):
        _, s = item
        start = time.perf_counter()
        pred, _ = interpolate_frames(model, list(s.frames))
        return pred, time.perf_counter() - start

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(run, named))  # map keeps input (filename) order
    preds = [imageio.from_uint8(imageio.to_uint8(p)) for p, _ in results]
    report = score(preds, [s.middle for _, s in named], [n for n, _ in named],
                   seconds_per_frame=float(np.mean([t for _, t in results])),
                   parameter_count=model.parameter_count())
    csv_text = report.to_csv()
    print(csv_text, end="")
    print(report.summary())
    if args.csv:
        Path(args.csv).write_text(csv_text)
    if args.figure:
        viz.plot_psnr_histogram(report.psnr, args.figure)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = run_ablation(args.suite, train_size=args.train_size, test_size=args.test_size,
                         steps=args.steps, seed=args.seed, batch_size=args.batch_size, lr=args.lr, decay=args.decay,
                         progress=lambda msg: print(msg, flush=True))
    text = table.to_text()
    print(text, end="")
    (out / f"{args.suite}.txt").write_text(text)
    (out / f"{args.suite}.csv").write_text(table.to_csv())
    viz.plot_ablation([r.label for r in table.rows], [r.psnr for r in table.rows],
                      out / f"{args.suite}.png", baseline=table.baseline_psnr)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    specs = synth.make_dataset(args.n, args.difficulty, args.seed, args.size, args.size)
    width = len(str(args.n - 1))
    for i, spec in enumerate(specs):
        s = synth.render(spec)
        d = out / f"scene_{i:0{max(4, width)}d}"
        imageio.write_sequence(d, s.frames, s.middle)
        (d / "scene.txt").write_text(spec.to_text())
    print(f"wrote {len(specs)} {args.difficulty} scenes to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_all

    start = time.perf_counter()
    results = run_all(args.seed)
    for r in results:
        print(f"{r.op:18s} max_rel_error={r.max_rel_error:.2e} {'ok' if r.passed else 'FAIL'}")
    failed = [r.op for r in results if not r.passed]
    print(f"{len(results)} ops, tolerance {TOLERANCE:g}, {time.perf_counter() - start:.1f} s")
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pdwn", description="Pyramid deformable warping for frame interpolation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a directory of sequences")
    p.add_argument("--config", help="architecture config (key = value text); default is the desk config")
    p.add_argument("--train-config", help="training config (key = value text)")
    p.add_argument("--data", required=True, help="directory of sequence subdirectories")
    p.add_argument("--out", required=True, help="checkpoint path; loss CSV and figure are written beside it")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("interpolate", help="synthesize the middle frame")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", nargs="+", required=True, metavar="PPM",
                   help="f0 f2, or f0 f2 f-1 f3 for a four-input model")
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", help="write the blend weight map here (P5)")
    p.add_argument("--offsets", help="directory for colour-coded mean offsets per scale")
    p.set_defaults(fn=cmd_interpolate)

    p = sub.add_parser("eval", help="score a checkpoint on sequence directories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dir", required=True)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--csv", help="also write the per-sample table here")
    p.add_argument("--figure", help="PSNR histogram (PNG)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare one ablation suite")
    p.add_argument("--suite", required=True, help=f"one of: {', '.join(SUITES)}")
    p.add_argument("--out", default="ablation")
    p.add_argument("--train-size", type=int, default=200)
    p.add_argument("--test-size", type=int, default=50)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay", choices=("none", "cosine"), default="cosine")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("synth", help="render synthetic sequences")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--difficulty", choices=synth.DIFFICULTIES, default="easy")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ckpt_io.CheckpointError, imageio.PNMError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
