"""Architecture configuration and the key-value text format shared by configs
and scene descriptions.

The text format is one ``key = value`` pair per line.  Sequences are comma
separated, booleans are ``true``/``false``, blank lines and ``#`` comments are
ignored.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text: str, kind):
    text = text.strip()
    origin = typing.get_origin(kind)
    if origin in (tuple, list):
        (item,) = {a for a in typing.get_args(kind) if a is not Ellipsis}
        if not text:
            return ()
        return tuple(parse_value(part, item) for part in text.split(","))
    if kind is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def dataclass_to_pairs(obj, prefix: str = "") -> list[tuple[str, str]]:
    return [(prefix + f.name, format_value(getattr(obj, f.name))) for f in dataclasses.fields(obj)]


def dataclass_from_pairs(cls, pairs: dict[str, str], prefix: str = "", strict: bool = True):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in pairs:
            try:
                kwargs[f.name] = parse_value(pairs[key], hints[f.name])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
    if strict:
        known = {prefix + f.name for f in dataclasses.fields(cls)}
        unknown = sorted(k for k in pairs if k.startswith(prefix) and k not in known)
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    return cls(**kwargs)


PAPER_CHANNELS = (16, 32, 64, 96, 128, 196)
PAPER_ESTIMATOR_WIDTHS = (64, 64, 64, 128, 196, 256)


@dataclass(frozen=True)
class ArchConfig:
    """Network shape and ablation switches.  Per-scale tuples are ordered from
    scale 1 (full resolution) to scale L (coarsest)."""

    num_scales: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    estimator_widths: tuple[int, ...] = (32, 32, 32)
    cost_radius: tuple[int, ...] = (3, 3, 3)
    cost_mode: str = "predefined"
    cost_normalization: str = "k2"
    learnt_cost_width: int = 32
    warp: str = "dconv"
    modulation: bool = True
    coarse_to_fine: bool = True
    input_frames: int = 2
    leaky_slope: float = 0.1
    blending: bool = True
    blend_width: int = 16
    context_enhancement: bool = True
    context_width: int = 16
    context_blocks: int = 5
    encoder_kernels: tuple[int, ...] = (7, 5)
    init: str = "he"  # or "fan_in": plain U(-1/sqrt(fan_in), 1/sqrt(fan_in))

    def __post_init__(self):
        L = self.num_scales
        if L < 1:
            raise ConfigError(f"num_scales must be >= 1, got {L}")
        for name in ("channels", "estimator_widths", "cost_radius"):
            value = getattr(self, name)
            if isinstance(value, int):
                value = (value,) * L
            object.__setattr__(self, name, tuple(int(v) for v in value))
            if len(getattr(self, name)) != L:
                raise ConfigError(f"{name} has {len(getattr(self, name))} entries, expected num_scales={L}")
        object.__setattr__(self, "encoder_kernels", tuple(int(k) for k in self.encoder_kernels))
        if len(self.encoder_kernels) != 2 or any(k % 2 == 0 for k in self.encoder_kernels):
            raise ConfigError(f"encoder_kernels needs two odd sizes, got {self.encoder_kernels}")
        if self.input_frames not in (2, 4):
            raise ConfigError(f"input_frames must be 2 or 4, got {self.input_frames}")
        if self.cost_mode not in ("predefined", "learnt", "none"):
            raise ConfigError(f"cost_mode must be predefined, learnt or none, got {self.cost_mode!r}")
        if self.cost_normalization not in ("k2", "channels"):
            raise ConfigError(f"cost_normalization must be k2 or channels, got {self.cost_normalization!r}")
        if self.init not in ("fan_in", "he"):
            raise ConfigError(f"init must be fan_in or he, got {self.init!r}")
        if self.warp not in ("dconv", "flow"):
            raise ConfigError(f"warp must be dconv or flow, got {self.warp!r}")
        if any(r < 0 for r in self.cost_radius):
            raise ConfigError(f"cost_radius entries must be >= 0, got {self.cost_radius}")
        if self.context_blocks < 0:
            raise ConfigError(f"context_blocks must be >= 0, got {self.context_blocks}")

    @classmethod
    def paper(cls, **overrides) -> "ArchConfig":
        """Six-scale configuration with the published channel widths."""
        base = dict(num_scales=6, channels=PAPER_CHANNELS, estimator_widths=PAPER_ESTIMATOR_WIDTHS,
                    cost_radius=(4,) * 6, learnt_cost_width=64, blend_width=16, context_width=64,
                    context_blocks=5)
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes) -> "ArchConfig":
        """Copy with changes.  When only ``num_scales`` changes, per-scale
        tuples are truncated or extended (channels double, widths and radii
        repeat)."""
        L = changes.get("num_scales", self.num_scales)
        if L != self.num_scales:
            grow = {"channels": lambda last: 2 * last, "estimator_widths": lambda last: last,
                    "cost_radius": lambda last: last}
            for name, step in grow.items():
                if name in changes:
                    continue
                seq = list(getattr(self, name))[:L]
                while len(seq) < L:
                    seq.append(step(seq[-1]))
                changes[name] = tuple(seq)
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclass_to_pairs(self))

    @classmethod
    def from_text(cls, text: str) -> "ArchConfig":
        return dataclass_from_pairs(cls, parse_pairs(text))

    def diff(self, other: "ArchConfig") -> list[str]:
        """Names of fields whose values differ."""
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name) != getattr(other, f.name)]

    # channel bookkeeping -------------------------------------------------

    @property
    def field_channels(self) -> int:
        """Channels emitted by each offset head (both warp directions)."""
        if self.warp == "flow":
            return 4
        return 54 if self.modulation else 36

    def cost_channels(self, scale: int) -> int:
        if self.cost_mode == "none":
            return 2 * self.channels[scale - 1]
        return (2 * self.cost_radius[scale - 1] + 1) ** 2

    def head_input_channels(self, scale: int) -> int:
        """Input width of the first offset-head convolution at ``scale`` (1-based)."""
        L = self.num_scales
        if not 1 <= scale <= L:
            raise ConfigError(f"scale {scale} outside 1..{L}")
        feats = self.input_frames * self.channels[scale - 1]
        if not self.coarse_to_fine:
            return feats + (self.estimator_widths[scale] if scale < L else 0)
        if scale == L:
            return feats + self.cost_channels(scale)
        return feats + self.cost_channels(scale) + self.field_channels + self.estimator_widths[scale]

    @property
    def blend_input_channels(self) -> int:
        return 2 * 3 + 2 * self.channels[0]

    @property
    def context_input_channels(self) -> int:
        return 3 * 3 + 2 * self.channels[0]

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.num_scales - 1)
