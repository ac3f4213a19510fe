"""Modulated deformable warping, optical-flow warping and cost volumes.

Offsets are stored tap-major: channel ``2j`` is the vertical and ``2j+1`` the
horizontal displacement (pixels of the current scale) of tap ``j``.  Taps are
enumerated row-major over the kernel, so tap ``j`` of a 3x3 kernel sits at
grid offset ``(j // 3 - 1, j % 3 - 1)``.

Sampling is bilinear.  Corners that fall outside the image contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tensor import (
    ParameterRegistry,
    ShapeError,
    Tensor,
    _make,
    concat,
    differentiable,
    leaky_relu,
)


def tap_grid(kernel_size: int) -> np.ndarray:
    """(K, 2) array of (dy, dx) grid offsets for a square kernel."""
    if kernel_size % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {kernel_size}")
    r = kernel_size // 2
    return np.array([(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)], dtype=np.float64)


@dataclass
class OffsetField:
    """Per-pixel, per-tap displacements and (optionally) modulation weights.

    ``modulation`` is ``None`` for plain optical-flow fields and for the
    unmodulated ablation; it is then treated as 1 everywhere.
    """

    offsets: Tensor
    modulation: Tensor | None = None

    def __post_init__(self):
        if self.offsets.shape[1] % 2:
            raise ShapeError(f"offset channels must be even, got {self.offsets.shape[1]}")
        if self.modulation is not None:
            o, m = self.offsets.shape, self.modulation.shape
            if (o[0], o[2], o[3]) != (m[0], m[2], m[3]):
                raise ShapeError(f"offsets {o} and modulation {m} differ in batch/spatial size")
            if m[1] * 2 != o[1]:
                raise ShapeError(f"modulation has {m[1]} taps but offsets have {o[1] // 2}")

    @property
    def taps(self) -> int:
        return self.offsets.shape[1] // 2


class GlobalFilter:
    """Spatially invariant warp kernel, shared by every frame warped at one scale."""

    def __init__(self, registry: ParameterRegistry, name: str, channels_in: int, channels_out: int,
                 kernel_size: int = 3, rng: np.random.Generator | None = None,
                 identity_gain: float | None = None, dtype=np.float32):
        shape = (channels_out, channels_in, kernel_size, kernel_size)
        if identity_gain is not None:
            if channels_in != channels_out:
                raise ShapeError("identity initialisation needs channels_in == channels_out")
            w = np.zeros(shape)
            c = kernel_size // 2
            w[np.arange(channels_out), np.arange(channels_in), c, c] = identity_gain
        else:
            bound = np.sqrt(1.0 / (channels_in * kernel_size * kernel_size))
            w = rng.uniform(-bound, bound, size=shape)
        self.weight = registry.add(name, w, dtype=dtype)

    @property
    def shape(self):
        return self.weight.shape


# ---------------------------------------------------------------------------
# sampling core


class _Sampler:
    """Bilinear gather at arbitrary positions, expressed as sparse matrices.

    Rows index samples in (batch, tap, y, x) order, columns index the
    flattened (batch, y, x) source pixels.  ``value`` gives the sampled
    values; ``dy``/``dx`` give their derivatives w.r.t. sample position.
    """

    def __init__(self, height: int, width: int, py: np.ndarray, px: np.ndarray, dtype):
        b = py.shape[0]
        n = py.size
        y0 = np.floor(py)
        x0 = np.floor(px)
        ay = (py - y0).reshape(-1)
        ax = (px - x0).reshape(-1)
        y0 = y0.astype(np.int64).reshape(-1)
        x0 = x0.astype(np.int64).reshape(-1)
        base = np.repeat(np.arange(b, dtype=np.int64) * height * width, n // b)

        idx = np.empty((n, 4), dtype=np.int64)
        valid = np.empty((n, 4), dtype=bool)
        for k, (oy, ox) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            yc = y0 + oy
            xc = x0 + ox
            ok = (yc >= 0) & (yc < height) & (xc >= 0) & (xc < width)
            valid[:, k] = ok
            idx[:, k] = base + np.clip(yc, 0, height - 1) * width + np.clip(xc, 0, width - 1)

        ay1, ax1 = 1.0 - ay, 1.0 - ax
        weights = np.stack([ay1 * ax1, ay1 * ax, ay * ax1, ay * ax], axis=1)
        wy = np.stack([-ax1, -ax, ax1, ax], axis=1)
        wx = np.stack([-ay1, ay1, -ay, ay], axis=1)
        self.shape = (n, b * height * width)
        self._indices = idx.reshape(-1)
        self._indptr = np.arange(0, 4 * n + 1, 4, dtype=np.int64)
        self._valid = valid.reshape(-1)
        self.dtype = dtype
        self.value = self._matrix(weights)
        self._wy, self._wx = wy, wx

    def _matrix(self, w: np.ndarray) -> sp.csr_matrix:
        data = np.where(self._valid, w.reshape(-1), 0.0).astype(self.dtype)
        return sp.csr_matrix((data, self._indices, self._indptr), shape=self.shape)

    def gradient_matrices(self) -> tuple[sp.csr_matrix, sp.csr_matrix]:
        return self._matrix(self._wy), self._matrix(self._wx)


def _flat_pixels(feature: np.ndarray) -> np.ndarray:
    b, c, h, w = feature.shape
    return np.ascontiguousarray(feature.transpose(0, 2, 3, 1)).reshape(b * h * w, c)


def _unflat_pixels(flat: np.ndarray, shape) -> np.ndarray:
    b, c, h, w = shape
    return np.ascontiguousarray(flat.reshape(b, h, w, c).transpose(0, 3, 1, 2))


def _positions(offsets: np.ndarray, taps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, _, h, w = offsets.shape
    k = taps.shape[0]
    yy = np.arange(h, dtype=np.float64)[None, None, :, None]
    xx = np.arange(w, dtype=np.float64)[None, None, None, :]
    off = offsets.astype(np.float64).reshape(b, k, 2, h, w)
    py = yy + taps[:, 0][None, :, None, None] + off[:, :, 0]
    px = xx + taps[:, 1][None, :, None, None] + off[:, :, 1]
    return py, px


# ---------------------------------------------------------------------------
# operators


@differentiable("deformable_warp")
def deformable_warp(feature: Tensor, field: OffsetField, filter) -> Tensor:
    """Modulated deformable convolution with a global (spatially invariant) filter.

    out(x) = sum_j w(j) * m(j, x) * feature(x + R(j) + f(j, x))

    ``filter`` is a :class:`GlobalFilter` or a (C_out, C_in, k, k) tensor; the
    tap grid R follows from its kernel size.
    """
    weight = filter.weight if isinstance(filter, GlobalFilter) else filter
    cout, cin, kh, kw = weight.shape
    b, c, h, w = feature.shape
    if kh != kw:
        raise ShapeError(f"deformable_warp: filter must be square, got {kh}x{kw}")
    if c != cin:
        raise ShapeError(f"deformable_warp: feature channels {c} != filter input channels {cin}")
    taps = tap_grid(kh)
    k = taps.shape[0]
    off = field.offsets
    if off.shape[1] != 2 * k:
        raise ShapeError(f"deformable_warp: {kh}x{kw} filter needs {2 * k} offset channels, got {off.shape[1]}")
    if (off.shape[0], off.shape[2], off.shape[3]) != (b, h, w):
        raise ShapeError(f"deformable_warp: field size {off.shape} does not match feature {feature.shape}")
    mod = field.modulation
    dtype = feature.dtype

    py, px = _positions(off.data, taps)
    sampler = _Sampler(h, w, py, px, dtype)
    flat = _flat_pixels(feature.data)
    sampled = (sampler.value @ flat).reshape(b, k, h, w, c)
    if mod is not None:
        modulated = sampled * mod.data[..., None]
    else:
        modulated = sampled
    # columns ordered (tap, channel) to match the reshaped filter
    cols = modulated.transpose(0, 2, 3, 1, 4).reshape(b * h * w, k * c)
    wmat = weight.data.reshape(cout, cin, k).transpose(0, 2, 1).reshape(cout, k * cin)
    out = _unflat_pixels(cols @ wmat.T, (b, cout, h, w))

    parents = [feature, off, weight] + ([mod] if mod is not None else [])

    def back(g):
        gm = _flat_pixels(g)
        gw = (gm.T @ cols).reshape(cout, k, cin).transpose(0, 2, 1).reshape(weight.shape)
        dcols = (gm @ wmat).reshape(b, h, w, k, c).transpose(0, 3, 1, 2, 4)
        gmod = (dcols * sampled).sum(axis=-1) if mod is not None else None
        ds = dcols * mod.data[..., None] if mod is not None else dcols
        ds_flat = ds.reshape(-1, c)
        gfeat = _unflat_pixels(sampler.value.T @ ds_flat, feature.shape) if feature.requires_grad else None
        goff = None
        if off.requires_grad:
            sy, sx = sampler.gradient_matrices()
            gy = ((sy @ flat) * ds_flat).sum(axis=-1).reshape(b, k, h, w)
            gx = ((sx @ flat) * ds_flat).sum(axis=-1).reshape(b, k, h, w)
            goff = np.stack([gy, gx], axis=2).reshape(off.shape).astype(dtype, copy=False)
        grads = [gfeat, goff, gw]
        if mod is not None:
            grads.append(gmod)
        return tuple(grads)

    return _make(out, parents, back, "deformable_warp")


@differentiable("flow_warp")
def flow_warp(feature: Tensor, flow: Tensor) -> Tensor:
    """Single-tap bilinear backward warp: out(x) = feature(x + flow(x)).

    ``flow`` channel 0 is the vertical, channel 1 the horizontal displacement.
    """
    b, c, h, w = feature.shape
    if flow.shape[1] != 2:
        raise ShapeError(f"flow_warp: flow needs 2 channels, got {flow.shape[1]}")
    if (flow.shape[0], flow.shape[2], flow.shape[3]) != (b, h, w):
        raise ShapeError(f"flow_warp: flow size {flow.shape} does not match feature {feature.shape}")
    dtype = feature.dtype
    py, px = _positions(flow.data, np.zeros((1, 2)))
    sampler = _Sampler(h, w, py, px, dtype)
    flat = _flat_pixels(feature.data)
    out = _unflat_pixels(sampler.value @ flat, feature.shape)

    def back(g):
        g_flat = _flat_pixels(g)
        gfeat = _unflat_pixels(sampler.value.T @ g_flat, feature.shape) if feature.requires_grad else None
        gflow = None
        if flow.requires_grad:
            sy, sx = sampler.gradient_matrices()
            gy = ((sy @ flat) * g_flat).sum(axis=-1).reshape(b, 1, h, w)
            gx = ((sx @ flat) * g_flat).sum(axis=-1).reshape(b, 1, h, w)
            gflow = np.concatenate([gy, gx], axis=1).astype(dtype, copy=False)
        return gfeat, gflow

    return _make(out, (feature, flow), back, "flow_warp")


def cost_channels(radius: int) -> int:
    return (2 * radius + 1) ** 2


@differentiable("cost_volume")
def cost_volume(left: Tensor, right: Tensor, radius: int, normalization: str = "k2") -> Tensor:
    """Correlation of ``left(x)`` with ``right(x + d)`` for every d in a
    (2r+1)^2 window.  Channel ``(dy+r)*k + (dx+r)`` holds displacement (dy, dx).

    ``normalization`` is ``"k2"`` (divide by k*k) or ``"channels"`` (divide by
    the feature length).  Samples of ``right`` outside the image are zero.
    """
    if left.shape != right.shape:
        raise ShapeError(f"cost_volume: left {left.shape} and right {right.shape} differ")
    if radius < 0:
        raise ValueError(f"cost_volume: radius must be >= 0, got {radius}")
    b, c, h, w = left.shape
    k = 2 * radius + 1
    if normalization == "k2":
        norm = 1.0 / (k * k)
    elif normalization == "channels":
        norm = 1.0 / c
    else:
        raise ValueError(f"unknown cost normalization {normalization!r}")
    norm = left.dtype.type(norm)
    r = radius
    ld = left.data
    rp = np.pad(right.data, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.empty((b, k * k, h, w), dtype=left.dtype)
    for d in range(k * k):
        dy, dx = divmod(d, k)
        out[:, d] = (ld * rp[:, :, dy:dy + h, dx:dx + w]).sum(axis=1) * norm

    def back(g):
        gs = g * norm
        gl = np.zeros_like(ld) if left.requires_grad else None
        grp = np.zeros_like(rp) if right.requires_grad else None
        for d in range(k * k):
            dy, dx = divmod(d, k)
            gd = gs[:, d:d + 1]
            if gl is not None:
                gl += gd * rp[:, :, dy:dy + h, dx:dx + w]
            if grp is not None:
                grp[:, :, dy:dy + h, dx:dx + w] += gd * ld
        gr = np.ascontiguousarray(grp[:, :, r:r + h, r:r + w]) if grp is not None else None
        return gl, gr

    return _make(out, (left, right), back, "cost_volume")


class LearntCost:
    """Two-layer convolutional matching network: concat(left, right) -> k*k channels."""

    def __init__(self, registry: ParameterRegistry, name: str, channels: int, radius: int,
                 hidden: int, rng: np.random.Generator, slope: float = 0.1, dtype=np.float32,
                 gain: float = 1.0):
        from .layers import Conv2d

        self.out_channels = cost_channels(radius)
        self.slope = slope
        self.conv1 = Conv2d(registry, f"{name}.conv1", 2 * channels, hidden, 3, rng, dtype=dtype, gain=gain)
        self.conv2 = Conv2d(registry, f"{name}.conv2", hidden, self.out_channels, 3, rng, dtype=dtype, gain=gain)

    def __call__(self, left: Tensor, right: Tensor) -> Tensor:
        return learnt_cost(left, right, self)


@differentiable("learnt_cost")
def learnt_cost(left: Tensor, right: Tensor, net: LearntCost) -> Tensor:
    if left.shape != right.shape:
        raise ShapeError(f"learnt_cost: left {left.shape} and right {right.shape} differ")
    if net.conv1.in_channels != 2 * left.shape[1]:
        raise ShapeError(f"learnt_cost: net expects {net.conv1.in_channels} input channels, "
                         f"got 2*{left.shape[1]}")
    x = concat([left, right])
    return net.conv2(leaky_relu(net.conv1(x), net.slope))


def mean_offset(field: OffsetField) -> Tensor:
    """Modulation-weighted mean of R(j) + f(j, x) over taps; 2 channels (dy, dx).

    For visualisation only; the result is not part of the graph.
    """
    b, c2, h, w = field.offsets.shape
    k = c2 // 2
    size = int(round(np.sqrt(k)))
    taps = tap_grid(size)
    off = field.offsets.data.astype(np.float64).reshape(b, k, 2, h, w)
    pos = off + taps[None, :, :, None, None]
    if field.modulation is None:
        m = np.ones((b, k, h, w))
    else:
        m = field.modulation.data.astype(np.float64)
    num = (pos * m[:, :, None]).sum(axis=1)
    den = m.sum(axis=1)[:, None] + 1e-8
    return Tensor((num / den).astype(field.offsets.dtype))


def identity_filter(channels: int, dtype=np.float32) -> Tensor:
    """1x1 identity kernel; with a 1-tap field this reduces deformable_warp to flow_warp."""
    return Tensor(np.eye(channels).reshape(channels, channels, 1, 1), dtype=dtype)


def flow_as_field(flow: Tensor) -> OffsetField:
    b, _, h, w = flow.shape
    return OffsetField(flow, Tensor(np.ones((b, 1, h, w)), dtype=flow.dtype))


__all__ = [
    "OffsetField",
    "GlobalFilter",
    "LearntCost",
    "tap_grid",
    "deformable_warp",
    "flow_warp",
    "cost_volume",
    "cost_channels",
    "learnt_cost",
    "mean_offset",
    "identity_filter",
    "flow_as_field",
]
