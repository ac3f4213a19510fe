"""Training loop, reconstruction loss, evaluation and ablation harness."""

from __future__ import annotations

import copy
import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics, synth
from .config import ConfigError, dataclass_from_pairs, dataclass_to_pairs, parse_pairs
from .model import PDWN
from .synth import Sample, SceneSpec
from .tensor import Adam, ShapeError, Tensor, _make, backward, differentiable, no_grad


@differentiable("l1_loss")
def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} and target {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    out = np.full((1, 1, 1, 1), np.abs(diff).mean(dtype=np.float64), dtype=pred.dtype)

    def back(g):
        gs = np.sign(diff) * (g.reshape(-1)[0] / n)
        return gs, -gs

    return _make(out, (pred, target), back, "l1_loss")


# ---------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule.  One epoch is ceil(len(dataset) / batch_size)
    steps; with ``two_phase`` the first ``pretrain_fraction`` of all steps
    skip context enhancement and the rest train end to end."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 10
    max_steps: int = 0  # when positive, replaces epochs as the budget
    seed: int = 0
    two_phase: bool = True
    pretrain_fraction: float = 0.8
    augment: bool = True
    eval_every: int = 0  # steps; 0 disables periodic evaluation
    decay: str = "none"  # "cosine" anneals lr towards min_lr_fraction * lr over all steps
    min_lr_fraction: float = 0.05

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.max_steps < 0:
            raise ConfigError(f"epochs and max_steps must be >= 0, got {self.epochs}, {self.max_steps}")
        if not 0.0 <= self.pretrain_fraction <= 1.0:
            raise ConfigError(f"pretrain_fraction must lie in [0, 1], got {self.pretrain_fraction}")
        if self.decay not in ("none", "cosine"):
            raise ConfigError(f"decay must be none or cosine, got {self.decay!r}")
        if not 0.0 < self.min_lr_fraction <= 1.0:
            raise ConfigError(f"min_lr_fraction must lie in (0, 1], got {self.min_lr_fraction}")

    def steps_per_epoch(self, dataset_size: int) -> int:
        return -(-dataset_size // self.batch_size)

    def total_steps(self, dataset_size: int) -> int:
        if self.max_steps:
            return self.max_steps
        return self.epochs * self.steps_per_epoch(dataset_size)

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for the 0-based ``step`` of a ``total``-step run."""
        if self.decay == "none" or total <= 1:
            return self.lr
        floor = self.min_lr_fraction
        return self.lr * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * step / (total - 1))))

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclass_to_pairs(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return dataclass_from_pairs(cls, parse_pairs(text))


@dataclass(frozen=True)
class LossRecord:
    step: int  # 1-based index of the optimizer step that produced this loss
    epoch: int
    phase: str  # "pretrain" or "finetune"
    loss: float


@dataclass
class EvalReport:
    psnr: list[float]
    ssim: list[float]
    ie: list[float]
    seconds_per_frame: float
    parameter_count: int
    names: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.psnr)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_ie(self) -> float:
        return float(np.mean(self.ie))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample", "psnr", "ssim", "ie"])
        names = self.names or [str(i) for i in range(self.count)]
        for name, p, s, e in zip(names, self.psnr, self.ssim, self.ie):
            writer.writerow([name, f"{p:.4f}", f"{s:.6f}", f"{e:.4f}"])
        writer.writerow(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}", f"{self.mean_ie:.4f}"])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"samples={self.count} psnr={self.mean_psnr:.3f} ssim={self.mean_ssim:.4f} "
                f"ie={self.mean_ie:.3f} seconds_per_frame={self.seconds_per_frame:.4f} "
                f"parameters={self.parameter_count}")


class Divergence(RuntimeError):
    """Training produced a non-finite loss.  The model keeps the parameters
    from before the failing step."""

    def __init__(self, step: int, result: "TrainResult"):
        super().__init__(f"loss became non-finite at step {step}; restored the last good parameters")
        self.step = step
        self.result = result


@dataclass
class TrainResult:
    model: PDWN
    optimizer: Adam
    step: int
    curve: list[LossRecord]
    evals: list[tuple[int, EvalReport]]


def curve_to_csv(curve: Sequence[LossRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "epoch", "phase", "loss"])
    for r in curve:
        writer.writerow([r.step, r.epoch, r.phase, repr(r.loss)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# evaluation


def predict(model: PDWN, frames: Sequence[np.ndarray], batch_size: int = 8) -> np.ndarray:
    """Middle frames for (N, 3, H, W) input stacks, clipped to [0, 1]."""
    n = frames[0].shape[0]
    out = []
    with no_grad():
        for start in range(0, n, batch_size):
            batch = [Tensor(f[start:start + batch_size], dtype=model.dtype) for f in frames]
            pred, _ = model(batch)
            out.append(np.clip(pred.data, 0.0, 1.0))
    return np.concatenate(out)


def score(preds, targets, names=None, seconds_per_frame: float = 0.0, parameter_count: int = 0) -> EvalReport:
    report = EvalReport([], [], [], seconds_per_frame, parameter_count, list(names or []))
    for p, t in zip(preds, targets):
        report.psnr.append(metrics.psnr(p, t))
        report.ssim.append(metrics.ssim(p, t))
        report.ie.append(metrics.interpolation_error(p, t))
    return report


def evaluate(model: PDWN, samples: Sequence[Sample], batch_size: int = 8) -> EvalReport:
    inputs, targets = synth.stack(samples)
    start = time.perf_counter()
    preds = predict(model, inputs, batch_size)
    elapsed = time.perf_counter() - start
    return score(preds, targets, seconds_per_frame=elapsed / len(samples),
                 parameter_count=model.parameter_count())


def evaluate_frame_average(samples: Sequence[Sample]) -> EvalReport:
    """Scores of the (I0 + I2) / 2 baseline."""
    preds = [metrics.frame_average(*s.nearest) for s in samples]
    return score(preds, [s.middle for s in samples])


# ---------------------------------------------------------------------------
# training


def _as_samples(dataset) -> list[Sample]:
    return [synth.render(d) if isinstance(d, SceneSpec) else d for d in dataset]


def _batch(samples: Sequence[Sample], order: np.ndarray, step_in_epoch: int, batch_size: int,
           rng: np.random.Generator | None, dtype) -> tuple[list[Tensor], Tensor]:
    idx = order[step_in_epoch * batch_size:(step_in_epoch + 1) * batch_size]
    chosen = [samples[i] for i in idx]
    if rng is not None:
        chosen = [synth.augment(s, rng) for s in chosen]
    inputs, target = synth.stack(chosen)
    return [Tensor(x, dtype=dtype) for x in inputs], Tensor(target, dtype=dtype)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 0, epoch]).permutation(n)


def train(model: PDWN, dataset, tcfg: TrainConfig, held_out=None, optimizer: Adam | None = None,
          start_step: int = 0, stop_step: int | None = None,
          progress: Callable[[LossRecord], None] | None = None) -> TrainResult:
    """Train ``model`` in place with Adam on the L1 reconstruction loss.

    ``dataset`` holds SceneSpecs or rendered Samples and is never modified.
    Sample order and augmentation are derived from (seed, epoch) and
    (seed, step), so resuming from a saved (model, optimizer, step) replays the
    same remaining steps.  ``stop_step`` ends training early (exclusive of
    later steps) without changing the schedule.
    """
    samples = _as_samples(dataset)
    if not samples:
        raise ValueError("dataset is empty")
    held = _as_samples(held_out) if held_out else []
    n = len(samples)
    per_epoch = tcfg.steps_per_epoch(n)
    total = tcfg.total_steps(n)
    end = total if stop_step is None else min(total, stop_step)
    use_context = model.config.context_enhancement
    pretrain_steps = int(round(tcfg.pretrain_fraction * total)) if (tcfg.two_phase and use_context) else 0
    opt = optimizer or Adam(model.params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    curve: list[LossRecord] = []
    evals: list[tuple[int, EvalReport]] = []
    order, order_epoch = None, -1

    for step in range(start_step, end):
        epoch = step // per_epoch
        if epoch != order_epoch:
            order, order_epoch = _epoch_order(tcfg.seed, epoch, n), epoch
        rng = np.random.default_rng([tcfg.seed, 1, step]) if tcfg.augment else None
        inputs, target = _batch(samples, order, step % per_epoch, tcfg.batch_size, rng, model.dtype)
        phase = "pretrain" if step < pretrain_steps else "finetune"

        model.params.zero_grad()
        pred, _ = model(inputs, context=(phase == "finetune"))
        loss = l1_loss(pred, target)
        value = float(loss.item())
        if not np.isfinite(value):
            raise Divergence(step + 1, TrainResult(model, opt, step, curve, evals))
        backward(loss, model.params)
        snapshot = model.params.state()
        moments = (opt.t, copy.deepcopy(opt.m), copy.deepcopy(opt.v))
        opt.lr = tcfg.lr_at(step, total)
        opt.step()
        if not all(np.isfinite(p.data).all() for p in model.params):
            model.params.load_state(snapshot)
            opt.load_state(*moments)
            raise Divergence(step + 1, TrainResult(model, opt, step, curve, evals))

        record = LossRecord(step + 1, epoch, phase, value)
        curve.append(record)
        if progress is not None:
            progress(record)
        if held and tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
            evals.append((step + 1, evaluate(model, held)))

    model.params.zero_grad()
    return TrainResult(model, opt, end, curve, evals)
