"""Offset and blend-weight images, plus matplotlib report figures."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import to_uint8, write_gray, write_pnm
from .tensor import Tensor
from .warp import OffsetField, mean_offset


def color_wheel() -> np.ndarray:
    """(55, 3) RGB table in [0, 1]: red-yellow-green-cyan-blue-magenta."""
    segments = [(15, (1, 0, 0), (1, 1, 0)), (6, (1, 1, 0), (0, 1, 0)), (4, (0, 1, 0), (0, 1, 1)),
                (11, (0, 1, 1), (0, 0, 1)), (13, (0, 0, 1), (1, 0, 1)), (6, (1, 0, 1), (1, 0, 0))]
    rows = []
    for n, start, end in segments:
        f = np.arange(n)[:, None] / n
        rows.append((1 - f) * np.array(start, dtype=np.float64) + f * np.array(end, dtype=np.float64))
    return np.concatenate(rows)


def flow_to_color(dy: np.ndarray, dx: np.ndarray, max_magnitude: float | None = None) -> tuple[np.ndarray, float]:
    """Colour-code a displacement field.  Hue encodes direction, saturation
    the magnitude relative to ``max_magnitude`` (the field's own maximum when
    omitted).  Returns (H, W, 3) uint8 and the magnitude used."""
    mag = np.hypot(dx, dy)
    scale = float(mag.max()) if max_magnitude is None else float(max_magnitude)
    u, v = (dx / scale, dy / scale) if scale > 0 else (np.zeros_like(dx), np.zeros_like(dy))
    wheel = color_wheel()
    n = len(wheel)
    rad = np.hypot(u, v)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % n
    f = (fk - k0)[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    inside = (rad <= 1)[..., None]
    col = np.where(inside, 1 - rad[..., None] * (1 - col), col * 0.75)
    return to_uint8(col), scale


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".txt")


def visualize_offsets(field, path, max_magnitude: float | None = None, index: int = 0) -> float:
    """Write the modulation-weighted mean offset of ``field`` (an OffsetField
    or an already reduced 2-channel (dy, dx) tensor) as a colour-coded P6 and
    the normalizing magnitude to ``<path>.txt``.  Returns that magnitude."""
    if isinstance(field, OffsetField):
        field = mean_offset(field)
    data = field.data if isinstance(field, Tensor) else np.asarray(field)
    if data.ndim == 4:
        data = data[index]
    rgb, scale = flow_to_color(data[0].astype(np.float64), data[1].astype(np.float64), max_magnitude)
    path = Path(path)
    write_pnm(path, rgb)
    _sidecar(path).write_text(f"max_magnitude = {scale!r}\n")
    return scale


def visualize_alpha(alpha, path, index: int = 0) -> np.ndarray:
    """Blend weight as P5: 0 is black (future frame trusted), 1 white (past frame)."""
    data = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    if data.ndim == 4:
        data = data[index, 0]
    write_gray(path, data)
    return to_uint8(data)


# ---------------------------------------------------------------------------
# report figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curve(curve, path, title: str = "training loss") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [r.step for r in curve]
    losses = [r.loss for r in curve]
    ax.plot(steps, losses, lw=0.8)
    finetune = [r.step for r in curve if r.phase == "finetune"]
    if finetune and len(finetune) < len(curve):
        ax.axvline(finetune[0], color="gray", ls="--", lw=0.8, label="context enhancement on")
        ax.legend()
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("L1 loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_ablation(labels: Sequence[str], psnr: Sequence[float], path, baseline: float | None = None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.5))
    ax.bar(range(len(labels)), psnr, color="tab:blue")
    if baseline is not None:
        ax.axhline(baseline, color="gray", ls="--", lw=0.8, label="frame average")
        ax.legend()
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("mean PSNR (dB)")
    lo = min(list(psnr) + ([baseline] if baseline is not None else []))
    ax.set_ylim(lo - 2, max(psnr) + 1)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_psnr_histogram(values: Sequence[float], path, baseline: Sequence[float] | None = None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bins = 20
    ax.hist(values, bins=bins, alpha=0.7, label="model")
    if baseline is not None:
        ax.hist(baseline, bins=bins, alpha=0.5, label="frame average")
        ax.legend()
    ax.set_xlabel("PSNR (dB)")
    ax.set_ylabel("samples")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
