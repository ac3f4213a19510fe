"""Ablation suites: one architectural axis varied under an identical budget."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Callable

from . import synth
from .config import ArchConfig
from .model import PDWN
from .train import TrainConfig, evaluate, evaluate_frame_average, train

# suite -> (difficulty, [(label, config changes)])
SUITES: dict[str, tuple[str, list[tuple[str, dict]]]] = {
    "warp": ("hard", [("optical flow warping", dict(warp="flow")),
                      ("deformable warping", {})]),
    "cost": ("hard", [("no cost volume", dict(cost_mode="none")),
                      ("cost volume", {}),
                      ("learnt cost volume", dict(cost_mode="learnt"))]),
    "coarse_to_fine": ("hard", [("single scale", dict(coarse_to_fine=False)),
                                ("coarse to fine", {})]),
    "levels": ("hard", [("2 levels", dict(num_scales=2)),
                        ("3 levels", {}),
                        ("4 levels", dict(num_scales=4))]),
    "context": ("hard", [("no context enhancement", dict(context_enhancement=False)),
                         ("context enhancement", {})]),
    "inputs": ("quadratic", [("2 inputs", {}),
                             ("4 inputs", dict(input_frames=4))]),
}


@dataclass
class AblationRow:
    label: str
    changes: str
    parameters: int
    psnr: float
    ssim: float
    ie: float
    train_seconds: float


@dataclass
class AblationTable:
    suite: str
    difficulty: str
    rows: list[AblationRow]
    baseline_psnr: float

    def row(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_text(self) -> str:
        width = max(len("Model"), len("frame average"), *(len(r.label) for r in self.rows))
        head = f"{'Model':<{width}}  {'PSNR':>7}  {'SSIM':>6}  {'IE':>6}  {'Params':>8}"
        lines = [f"# suite {self.suite} ({self.difficulty} scenes)", head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.label:<{width}}  {r.psnr:7.2f}  {r.ssim:6.4f}  {r.ie:6.2f}  {r.parameters:8d}")
        lines.append(f"{'frame average':<{width}}  {self.baseline_psnr:7.2f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["label", "changes", "parameters", "psnr", "ssim", "ie", "train_seconds"])
        for r in self.rows:
            writer.writerow([r.label, r.changes, r.parameters, f"{r.psnr:.4f}", f"{r.ssim:.6f}",
                             f"{r.ie:.4f}", f"{r.train_seconds:.1f}"])
        return buf.getvalue()


def _describe(changes: dict) -> str:
    return "; ".join(f"{k}={v}" for k, v in changes.items()) or "reference"


def build_data(difficulty: str, train_size: int, test_size: int, seed: int, size: int = 32):
    train_set = synth.render_all(synth.make_dataset(train_size, difficulty, seed, size, size))
    test_set = synth.render_all(synth.make_dataset(test_size, difficulty, seed + 10_000, size, size))
    return train_set, test_set


def train_and_score(config: ArchConfig, train_set, test_set, tcfg: TrainConfig):
    if config.input_frames == 2:
        train_set = [synth.nearest_only(s) for s in train_set]
        test_set = [synth.nearest_only(s) for s in test_set]
    model = PDWN(config, seed=tcfg.seed)
    start = time.perf_counter()
    train(model, train_set, tcfg)
    seconds = time.perf_counter() - start
    return model, evaluate(model, test_set), seconds


def run_ablation(suite: str, train_size: int = 200, test_size: int = 50, steps: int = 1000, seed: int = 0,
                 batch_size: int = 4, lr: float = 1e-3, decay: str = "cosine", base: ArchConfig | None = None,
                 progress: Callable[[str], None] | None = None, data=None) -> AblationTable:
    """Train every variant of ``suite`` on the same data, seed and step budget
    and tabulate held-out scores.  ``data`` may pass a prebuilt
    (train, test) pair of rendered samples."""
    difficulty, variants = SUITES[suite]
    base = base or ArchConfig()
    train_set, test_set = data if data is not None else build_data(difficulty, train_size, test_size, seed)
    tcfg = TrainConfig(lr=lr, batch_size=batch_size, max_steps=steps, seed=seed, decay=decay)
    rows = []
    for label, changes in variants:
        config = base.replace(**changes)
        _, report, seconds = train_and_score(config, train_set, test_set, tcfg)
        rows.append(AblationRow(label, _describe(changes), report.parameter_count, report.mean_psnr,
                                report.mean_ssim, report.mean_ie, seconds))
        if progress:
            progress(f"{label}: psnr {report.mean_psnr:.3f} ({seconds:.0f} s)")
    baseline = evaluate_frame_average(test_set).mean_psnr
    return AblationTable(suite, difficulty, rows, baseline)
