"""Procedural moving-sprite scenes with exact motion and occlusion.

Time runs so that the two nearest input frames sit at t = 0 and t = 1 and
the target frame at t = 0.5.  Five-frame scenes add inputs at t = -1 and
t = 2.  A sprite centre moves as ``p(t) = p0 + v t + a t^2 / 2``, so
velocities are in pixels per input-frame interval.  Positions and velocities
are ``(x, y)`` with x to the right and y down; flows are ``(dy, dx)`` to
match the warp ops.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, dataclass_from_pairs, dataclass_to_pairs, parse_pairs

SHAPES = ("rect", "disk", "textured")
SUPERSAMPLE = 4
DIFFICULTIES = ("easy", "hard", "quadratic")


def frame_times(frame_count: int) -> tuple[float, ...]:
    """Times of every rendered frame, the target included, in temporal order."""
    if frame_count == 3:
        return (0.0, 0.5, 1.0)
    if frame_count == 5:
        return (-1.0, 0.0, 0.5, 1.0, 2.0)
    raise ConfigError(f"frame_count must be 3 or 5, got {frame_count}")


@dataclass(frozen=True)
class SpriteSpec:
    shape: str = "rect"
    center: tuple[float, ...] = (16.0, 16.0)  # (x, y) at t = 0
    size: tuple[float, ...] = (4.0, 4.0)  # half extents (x, y); disks use size[0] as radius
    velocity: tuple[float, ...] = (0.0, 0.0)
    acceleration: tuple[float, ...] = (0.0, 0.0)
    color: tuple[float, ...] = (0.8, 0.2, 0.2)
    texture_seed: int = 0
    depth: int = 0  # 0 is frontmost

    def position(self, t: float) -> tuple[float, float]:
        return tuple(c + v * t + 0.5 * a * t * t
                     for c, v, a in zip(self.center, self.velocity, self.acceleration))

    @property
    def quadratic(self) -> bool:
        return any(a != 0.0 for a in self.acceleration)


@dataclass(frozen=True)
class SceneSpec:
    height: int = 32
    width: int = 32
    frame_count: int = 3
    background_seed: int = 0
    seed: int = 0  # the generator seed this scene was drawn from
    sprites: tuple[SpriteSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        frame_times(self.frame_count)
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"canvas {self.height}x{self.width} is empty")
        depths = [s.depth for s in self.sprites]
        if len(set(depths)) != len(depths):
            raise ConfigError(f"sprite depths must be distinct, got {depths}")
        for i, s in enumerate(self.sprites):
            if s.shape not in SHAPES:
                raise ConfigError(f"sprite {i}: unknown shape {s.shape!r}")
            for name, n in (("center", 2), ("size", 2), ("velocity", 2), ("acceleration", 2), ("color", 3)):
                if len(getattr(s, name)) != n:
                    raise ConfigError(f"sprite {i}: {name} needs {n} values")
            for t in frame_times(self.frame_count):
                x, y = s.position(t)
                if not (0.0 <= x <= self.width - 1 and 0.0 <= y <= self.height - 1):
                    raise ConfigError(f"sprite {i} centre ({x:.2f}, {y:.2f}) leaves the canvas at t={t}")

    @property
    def times(self) -> tuple[float, ...]:
        return frame_times(self.frame_count)

    @property
    def max_displacement(self) -> float:
        """Largest centre displacement between consecutive input frames."""
        inputs = [t for t in self.times if t != 0.5]
        worst = 0.0
        for s in self.sprites:
            for a, b in zip(inputs, inputs[1:]):
                pa, pb = np.array(s.position(a)), np.array(s.position(b))
                worst = max(worst, float(np.hypot(*(pb - pa))))
        return worst

    def to_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in dataclass_to_pairs(self) if k != "sprites"]
        lines.append(f"sprites = {len(self.sprites)}")
        for i, s in enumerate(self.sprites):
            lines.extend(f"{k} = {v}" for k, v in dataclass_to_pairs(s, prefix=f"sprite{i}."))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneSpec":
        pairs = parse_pairs(text)
        count = int(pairs.pop("sprites", "0"))
        sprites = []
        for i in range(count):
            prefix = f"sprite{i}."
            own = {k: v for k, v in pairs.items() if k.startswith(prefix)}
            sprites.append(dataclass_from_pairs(SpriteSpec, own, prefix=prefix))
            for k in own:
                del pairs[k]
        fields = {f.name for f in dataclasses.fields(cls)} - {"sprites"}
        unknown = sorted(set(pairs) - fields)
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
        scene = dataclass_from_pairs(cls, pairs, strict=False)
        return dataclasses.replace(scene, sprites=tuple(sprites))


@dataclass(frozen=True)
class Sample:
    """Rendered scene.  ``frames`` are the inputs in temporal order (2 or 4),
    all images are float32 ``(3, H, W)`` in [0, 1].

    ``flow_to_0``/``flow_to_2`` map each target pixel to its position in the
    nearest past/future frame.  ``occlusion`` is 0 where the target pixel is
    visible in both of those frames, 1 where only the past frame sees it, 2
    where only the future frame does and 3 where neither does.  ``surface``
    labels the target pixel with 0 for background and 1 + index for sprites.
    """

    frames: tuple[np.ndarray, ...]
    middle: np.ndarray
    # ground truth, absent for sequences loaded from disk
    flow_to_0: np.ndarray | None = None
    flow_to_2: np.ndarray | None = None
    occlusion: np.ndarray | None = None
    surface: np.ndarray | None = None
    hidden_by_sprite: np.ndarray | None = None  # sprite pixels covered by another sprite in frame 0 or 2

    @property
    def nearest(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self.frames) == 2:
            return self.frames[0], self.frames[1]
        return self.frames[1], self.frames[2]


def _texture(seed: int, x: np.ndarray, y: np.ndarray, base: np.ndarray, amplitude: float) -> np.ndarray:
    """Sum of three oriented sinusoids around ``base``; returns (3, ...)."""
    rng = np.random.default_rng(seed)
    out = np.broadcast_to(base.reshape(3, *([1] * x.ndim)), (3,) + x.shape).astype(np.float64)
    for _ in range(3):
        freq = rng.uniform(0.25, 0.9)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        weights = rng.uniform(-1.0, 1.0, size=3) * amplitude / 3
        wave = np.sin(freq * (np.cos(angle) * x + np.sin(angle) * y) + phase)
        out += weights.reshape(3, *([1] * x.ndim)) * wave
    return np.clip(out, 0.0, 1.0)


def _background(spec: SceneSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(spec.background_seed)
    base = rng.uniform(0.3, 0.7, size=3)
    return _texture(spec.background_seed + 1, x, y, base, 0.25)


def _coverage(s: SpriteSpec, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cx, cy = s.position(t)
    if s.shape == "disk":
        return (x - cx) ** 2 + (y - cy) ** 2 <= s.size[0] ** 2
    return (np.abs(x - cx) <= s.size[0]) & (np.abs(y - cy) <= s.size[1])


def _sprite_color(s: SpriteSpec, t: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    cx, cy = s.position(t)
    base = np.asarray(s.color, dtype=np.float64)
    if s.shape == "textured":
        return _texture(s.texture_seed, x - cx, y - cy, base, 0.6)
    # gentle shading so flat sprites still carry some interior gradient
    shade = 1.0 + 0.15 * ((x - cx) + (y - cy)) / (s.size[0] + s.size[1] + 1e-9)
    return np.clip(base.reshape(3, *([1] * x.ndim)) * shade, 0.0, 1.0)


def _back_to_front(spec: SceneSpec) -> list[int]:
    return sorted(range(len(spec.sprites)), key=lambda i: -spec.sprites[i].depth)


def _paint(spec: SceneSpec, t: float, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Colours (3, ...) and surface labels at sample points (x, y)."""
    image = _background(spec, x, y)
    label = np.zeros(x.shape, dtype=np.int32)
    for i in _back_to_front(spec):
        s = spec.sprites[i]
        mask = _coverage(s, t, x, y)
        if mask.any():
            image = np.where(mask, _sprite_color(s, t, x, y), image)
            label[mask] = i + 1
    return image, label


def _pixel_grid(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(spec.width, dtype=np.float64), np.arange(spec.height, dtype=np.float64))


def render_frame(spec: SceneSpec, t: float) -> np.ndarray:
    """Antialiased frame at time ``t``: the mean over an S x S grid of
    sub-pixel samples per pixel (pixel centres sit on integer coordinates)."""
    n = SUPERSAMPLE
    sub = (np.arange(n) + 0.5) / n - 0.5
    xs = (np.arange(spec.width)[:, None] + sub[None, :]).reshape(-1)
    ys = (np.arange(spec.height)[:, None] + sub[None, :]).reshape(-1)
    x, y = np.meshgrid(xs, ys)
    image, _ = _paint(spec, t, x, y)
    image = image.reshape(3, spec.height, n, spec.width, n).mean(axis=(2, 4))
    return image.astype(np.float32)


def _motion(spec: SceneSpec, label: np.ndarray, t_from: float, t_to: float) -> np.ndarray:
    """Per-pixel (dy, dx) displacement of each pixel's surface between two times."""
    flow = np.zeros((2,) + label.shape, dtype=np.float64)
    for i, s in enumerate(spec.sprites):
        mask = label == i + 1
        (x0, y0), (x1, y1) = s.position(t_from), s.position(t_to)
        flow[0][mask] = y1 - y0
        flow[1][mask] = x1 - x0
    return flow


def _visible(spec: SceneSpec, label: np.ndarray, flow: np.ndarray, t: float, x, y):
    """Whether each target pixel's surface is the top surface at its
    corresponding position at time ``t``, plus the label found there."""
    sx, sy = x + flow[1], y + flow[0]
    inside = (sx >= -0.5) & (sx <= spec.width - 0.5) & (sy >= -0.5) & (sy <= spec.height - 0.5)
    _, found = _paint(spec, t, sx, sy)
    return inside & (found == label), found


def render(spec: SceneSpec) -> Sample:
    times = spec.times
    images = [render_frame(spec, t) for t in times]
    mid = times.index(0.5)
    middle = images.pop(mid)
    x, y = _pixel_grid(spec)
    _, label = _paint(spec, 0.5, x, y)
    flow0 = _motion(spec, label, 0.5, 0.0)
    flow2 = _motion(spec, label, 0.5, 1.0)
    vis0, found0 = _visible(spec, label, flow0, 0.0, x, y)
    vis2, found2 = _visible(spec, label, flow2, 1.0, x, y)
    occlusion = np.where(vis0 & vis2, 0, np.where(vis0, 1, np.where(vis2, 2, 3))).astype(np.uint8)
    sprite = label > 0
    hidden = sprite & (((~vis0) & (found0 > 0) & (found0 != label)) | ((~vis2) & (found2 > 0) & (found2 != label)))
    return Sample(tuple(images), middle, flow0.astype(np.float32), flow2.astype(np.float32),
                  occlusion, label.astype(np.int16), hidden)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Horizontal flip and temporal reversal, each with probability 1/2.
    Both draws are always consumed so the stream stays aligned."""
    flip, reverse = rng.random() < 0.5, rng.random() < 0.5
    return transform(sample, flip=flip, reverse=reverse)


def transform(sample: Sample, flip: bool = False, reverse: bool = False) -> Sample:
    s = sample
    if flip:
        def mirror(a):
            return None if a is None else np.ascontiguousarray(a[..., ::-1])

        def mirror_flow(flow):
            if flow is None:
                return None
            out = mirror(flow)
            out[1] *= -1
            return out

        s = Sample(tuple(mirror(f) for f in s.frames), mirror(s.middle), mirror_flow(s.flow_to_0),
                   mirror_flow(s.flow_to_2), mirror(s.occlusion), mirror(s.surface), mirror(s.hidden_by_sprite))
    if reverse:
        swap = np.array([0, 2, 1, 3], dtype=np.uint8)
        occlusion = None if s.occlusion is None else swap[s.occlusion]
        s = Sample(tuple(reversed(s.frames)), s.middle, s.flow_to_2, s.flow_to_0,
                   occlusion, s.surface, s.hidden_by_sprite)
    return s


# dataset generation ------------------------------------------------------

def _place(rng, size: int, times, v: float, a: float, margin: float) -> float | None:
    """Start coordinate keeping the centre within [margin, size-1-margin] at
    every time, or None when the motion cannot fit."""
    path = [v * t + 0.5 * a * t * t for t in times]
    lo, hi = margin - min(path), size - 1 - margin - max(path)
    if lo > hi:
        return None
    return float(rng.uniform(lo, hi))


def _random_sprite(rng, spec_h: int, spec_w: int, times, depth: int, max_speed: float,
                   min_speed: float, accel: tuple[float, float] | None, shapes, size_range) -> SpriteSpec | None:
    speed = rng.uniform(min_speed, max_speed)
    angle = rng.uniform(0, 2 * np.pi)
    v = (speed * np.cos(angle), speed * np.sin(angle))
    a = (0.0, 0.0)
    if accel is not None:
        mag = rng.uniform(*accel)
        theta = rng.uniform(0, 2 * np.pi)
        a = (mag * np.cos(theta), mag * np.sin(theta))
    half = rng.uniform(*size_range, size=2)
    shape = str(rng.choice(shapes))
    if shape == "disk":
        half[1] = half[0]
    x = _place(rng, spec_w, times, v[0], a[0], 1.0)
    y = _place(rng, spec_h, times, v[1], a[1], 1.0)
    if x is None or y is None:
        return None
    return SpriteSpec(shape=shape, center=(round(x, 4), round(y, 4)), size=tuple(round(float(h), 4) for h in half),
                      velocity=tuple(round(float(c), 4) for c in v),
                      acceleration=tuple(round(float(c), 4) for c in a),
                      color=tuple(round(float(c), 4) for c in rng.uniform(0.05, 0.95, size=3)),
                      texture_seed=int(rng.integers(2 ** 31)), depth=depth)


def _disjoint(sprites, times) -> bool:
    """Bounding circles never touch at any rendered time (with a 1 px gap)."""
    for t in times:
        for i in range(len(sprites)):
            for j in range(i + 1, len(sprites)):
                a, b = sprites[i], sprites[j]
                (ax, ay), (bx, by) = a.position(t), b.position(t)
                if np.hypot(ax - bx, ay - by) <= np.hypot(*a.size) + np.hypot(*b.size) + 1.0:
                    return False
    return True


_PRESETS = {
    # accel: acceleration magnitude range, drawn per sprite with probability p_quad
    # limit: cap on the displacement between consecutive input frames
    "easy": dict(count=(1, 2), speed=(2.0, 4.0), accel=None, p_quad=0.0, frames=3, overlap=False,
                 size=(4.0, 8.0), limit=4.0),
    "hard": dict(count=(2, 4), speed=(2.0, 16.0), accel=(1.0, 6.0), p_quad=0.5, frames=3, overlap=True,
                 size=(3.0, 7.0), limit=16.0),
    "quadratic": dict(count=(1, 2), speed=(0.5, 3.0), accel=(2.0, 4.0), p_quad=1.0, frames=5, overlap=False,
                      size=(3.0, 6.0), limit=8.0),
}


def make_scene(rng: np.random.Generator, difficulty: str, height: int = 32, width: int = 32,
               seed: int = 0) -> SceneSpec:
    try:
        preset = _PRESETS[difficulty]
    except KeyError:
        raise ConfigError(f"difficulty must be one of {', '.join(DIFFICULTIES)}, got {difficulty!r}") from None
    times = frame_times(preset["frames"])
    while True:
        count = int(rng.integers(preset["count"][0], preset["count"][1] + 1))
        depths = rng.permutation(count)
        sprites = []
        for d in depths:
            accel = preset["accel"] if rng.random() < preset["p_quad"] else None
            for _ in range(50):
                s = _random_sprite(rng, height, width, times, int(d), preset["speed"][1], preset["speed"][0],
                                   accel, SHAPES, preset["size"])
                if s is not None:
                    break
            else:
                break
            sprites.append(s)
        if len(sprites) != count:
            continue
        if not preset["overlap"] and not _disjoint(sprites, times):
            continue
        scene = SceneSpec(height=height, width=width, frame_count=preset["frames"],
                          background_seed=int(rng.integers(2 ** 31)), seed=seed, sprites=tuple(sprites))
        if scene.max_displacement <= preset["limit"]:
            return scene


def make_dataset(n: int, difficulty: str = "easy", seed: int = 0, height: int = 32,
                 width: int = 32) -> list[SceneSpec]:
    """``n`` scene descriptions; scene i depends only on (seed, i)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [make_scene(np.random.default_rng([seed, i]), difficulty, height, width, seed=seed)
            for i in range(n)]


def render_all(specs) -> list[Sample]:
    return [render(s) for s in specs]


def nearest_only(sample: Sample) -> Sample:
    """The two-input view of a sample (drops the outer frames of five-frame scenes)."""
    if len(sample.frames) == 2:
        return sample
    return dataclasses.replace(sample, frames=sample.nearest)


def stack(samples) -> tuple[list[np.ndarray], np.ndarray]:
    """Batch samples: inputs as a list of (B, 3, H, W) arrays, plus the targets."""
    count = len(samples[0].frames)
    inputs = [np.stack([s.frames[k] for s in samples]) for k in range(count)]
    return inputs, np.stack([s.middle for s in samples])
