"""The pyramid deformable warping network.

Data flow for two inputs I0, I2 (four inputs add I-1, I3 to every estimator
head but never to warping or blending):

    encode_pyramid -> coarsest_estimate -> refine_scale (L-1 .. 1)
                   -> blend -> context_enhance
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ArchConfig, ConfigError
from .layers import Conv2d, ConvStack, init_gain
from .tensor import (
    ParameterRegistry,
    ShapeError,
    Tensor,
    add,
    affine,
    bilinear_resize,
    concat,
    expand_channels,
    leaky_relu,
    max_pool2,
    mul,
    narrow,
    sigmoid,
    softmax_channels,
)
from .warp import GlobalFilter, LearntCost, OffsetField, cost_volume, deformable_warp, flow_warp, mean_offset

PyramidFeatures = list  # per input frame: [F^1, ..., F^L]


@dataclass
class ScaleEstimate:
    """Warp fields toward frames 0 and 2 at one scale, plus the estimator's
    penultimate features that feed the next finer scale."""

    scale: int
    fields: tuple[OffsetField, OffsetField]
    features: Tensor | None


@dataclass
class Diagnostics:
    estimates: list[ScaleEstimate] = field(default_factory=list)  # coarse to fine
    alpha: Tensor | None = None
    blended: Tensor | None = None
    warped_frames: tuple[Tensor, Tensor] | None = None
    warped_features: tuple[Tensor, Tensor] | None = None
    pad: tuple[int, int] = (0, 0)

    def mean_offsets(self) -> list[tuple[Tensor, Tensor]]:
        """Per scale (coarse to fine), the modulation-weighted mean offsets
        toward frame 0 and frame 2."""
        return [(mean_offset(e.fields[0]), mean_offset(e.fields[1])) for e in self.estimates]


def _split_head(out: Tensor, cfg: ArchConfig) -> tuple[Tensor, Tensor, Tensor | None, Tensor | None]:
    """Head output -> (delta offsets to 0, to 2, modulation logits to 0, to 2)."""
    if cfg.warp == "flow":
        return narrow(out, 0, 2), narrow(out, 2, 2), None, None
    d0, d2 = narrow(out, 0, 18), narrow(out, 18, 18)
    if not cfg.modulation:
        return d0, d2, None, None
    return d0, d2, narrow(out, 36, 9), narrow(out, 45, 9)


class PDWN:
    """Two- or four-input frame interpolator.

    Parameters live in ``self.params``; construction is deterministic in
    ``seed``.  Every offset head and the context-enhancement output start at
    zero and every warp filter starts as the identity, so an untrained model
    warps with zero offsets.
    """

    def __init__(self, config: ArchConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = config or ArchConfig()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        self.params = ParameterRegistry()
        rng = np.random.default_rng(seed)
        reg, slope, L = self.params, cfg.leaky_slope, cfg.num_scales
        # identity warp at init: filter gain compensates the initial modulation of 0.5
        gain = 2.0 if cfg.modulation else 1.0
        g = init_gain(cfg.init, slope)

        self.encoder = []
        prev = 3
        for s in range(1, L + 1):
            c = cfg.channels[s - 1]
            k1, k2 = cfg.encoder_kernels if s == 1 else (3, 3)
            self.encoder.append((
                Conv2d(reg, f"encoder.s{s}.0", prev, c, k1, rng, dtype=dtype, gain=g),
                Conv2d(reg, f"encoder.s{s}.1", c, c, k2, rng, dtype=dtype, gain=g),
            ))
            prev = c

        self.heads: dict[int, ConvStack] = {}
        self.warp_filters: dict[int, GlobalFilter] = {}
        self.cost_nets: dict[int, LearntCost] = {}
        for s in range(L, 0, -1):
            width = cfg.estimator_widths[s - 1]
            c = cfg.channels[s - 1]
            if cfg.coarse_to_fine:
                out_ch = cfg.field_channels
            else:
                out_ch = cfg.field_channels if s == 1 else None
            widths = [cfg.head_input_channels(s), width, width] + ([out_ch] if out_ch else [])
            self.heads[s] = ConvStack(reg, f"estimator.s{s}", widths, 3, rng, slope,
                                      activate_last=out_ch is None, zero_last=out_ch is not None, dtype=dtype,
                                      gain=g)
            if not cfg.coarse_to_fine:
                continue
            if cfg.warp == "dconv" and s < L:
                self.warp_filters[s] = GlobalFilter(reg, f"warp_filter.s{s}", c, c, 3, rng,
                                                    identity_gain=gain, dtype=dtype)
            if cfg.cost_mode == "learnt":
                self.cost_nets[s] = LearntCost(reg, f"cost_net.s{s}", c, cfg.cost_radius[s - 1],
                                               cfg.learnt_cost_width, rng, slope, dtype=dtype, gain=g)

        c1 = cfg.channels[0]
        if cfg.warp == "dconv":
            self.frame_filter = GlobalFilter(reg, "blend.frame_filter", 3, 3, 3, rng, identity_gain=gain, dtype=dtype)
            self.feature_filter = GlobalFilter(reg, "blend.feature_filter", c1, c1, 3, rng,
                                               identity_gain=gain, dtype=dtype)
        else:
            self.frame_filter = self.feature_filter = None
        if cfg.blending:
            bw = cfg.blend_width
            self.blend_head = ConvStack(reg, "blend.head", [cfg.blend_input_channels, bw, bw, 2], 3, rng, slope,
                                        activate_last=False, zero_last=True, dtype=dtype, gain=g)

        if cfg.context_enhancement:
            cw = cfg.context_width
            self.context_in = Conv2d(reg, "context.in", cfg.context_input_channels, cw, 3, rng, dtype=dtype, gain=g)
            self.context_blocks = [
                (Conv2d(reg, f"context.block{i}.0", cw, cw, 3, rng, dtype=dtype, gain=g),
                 Conv2d(reg, f"context.block{i}.1", cw, cw, 3, rng, dtype=dtype, gain=g))
                for i in range(cfg.context_blocks)
            ]
            self.context_out = Conv2d(reg, "context.out", cw, 3, 3, rng, zero=True, dtype=dtype)

    # ------------------------------------------------------------------

    def parameter_count(self) -> int:
        return self.params.count()

    def _check_frames(self, frames: Sequence[Tensor]) -> None:
        if len(frames) != self.config.input_frames:
            raise ConfigError(f"model expects {self.config.input_frames} input frames, got {len(frames)}")
        ref = frames[0].shape
        for f in frames:
            if f.shape != ref:
                raise ShapeError(f"input frames differ in shape: {f.shape} vs {ref}")
        if ref[1] != 3:
            raise ShapeError(f"input frames need 3 channels, got {ref[1]}")

    def _nearest(self, items: Sequence) -> tuple:
        """The two inputs adjacent to the middle frame."""
        return (items[0], items[1]) if len(items) == 2 else (items[1], items[2])

    def _warp(self, x: Tensor, fld: OffsetField, filt: GlobalFilter | None) -> Tensor:
        if self.config.warp == "flow":
            return flow_warp(x, fld.offsets)
        return deformable_warp(x, fld, filt)

    def _cost(self, scale: int, left: Tensor, right: Tensor) -> Tensor:
        cfg = self.config
        if cfg.cost_mode == "none":
            return concat([left, right])
        if cfg.cost_mode == "learnt":
            return self.cost_nets[scale](left, right)
        return cost_volume(left, right, cfg.cost_radius[scale - 1], cfg.cost_normalization)

    def _fields_from(self, d0: Tensor, d2: Tensor, m0: Tensor | None, m2: Tensor | None):
        if m0 is not None:
            m0, m2 = sigmoid(m0), sigmoid(m2)
        return OffsetField(d0, m0), OffsetField(d2, m2)

    # pipeline stages ---------------------------------------------------

    def encode_pyramid(self, frames: Sequence[Tensor]) -> PyramidFeatures:
        """Shared encoder applied to every frame."""
        ref = frames[0].shape
        for f in frames:
            if f.shape != ref:
                raise ShapeError(f"input frames differ in shape: {f.shape} vs {ref}")
        slope = self.config.leaky_slope
        pyramids = []
        for frame in frames:
            x = frame
            levels = []
            for s, (conv_a, conv_b) in enumerate(self.encoder, start=1):
                if s > 1:
                    x = max_pool2(x)
                x = leaky_relu(conv_b(leaky_relu(conv_a(x), slope)), slope)
                levels.append(x)
            pyramids.append(levels)
        return pyramids

    def coarsest_estimate(self, feats: Sequence[Tensor]) -> ScaleEstimate:
        """Fields at scale L from the unwarped features of all inputs."""
        cfg = self.config
        L = cfg.num_scales
        f0, f2 = self._nearest(feats)
        x = concat([self._cost(L, f0, f2)] + list(feats))
        out, pen = self.heads[L](x, return_penultimate=True)
        return ScaleEstimate(L, self._fields_from(*_split_head(out, cfg)), pen)

    def upsample_field(self, fld: OffsetField, height: int, width: int) -> OffsetField:
        """Offsets are resized and doubled; modulation is resized only."""
        off = affine(bilinear_resize(fld.offsets, height, width), 2.0)
        mod = None if fld.modulation is None else bilinear_resize(fld.modulation, height, width)
        return OffsetField(off, mod)

    def refine_scale(self, prev: ScaleEstimate, feats: Sequence[Tensor], scale: int) -> ScaleEstimate:
        cfg = self.config
        if prev.scale != scale + 1:
            raise ShapeError(f"refine_scale: previous estimate is from scale {prev.scale}, expected {scale + 1}")
        f0, f2 = self._nearest(feats)
        _, _, h, w = f0.shape
        up0 = self.upsample_field(prev.fields[0], h, w)
        up2 = self.upsample_field(prev.fields[1], h, w)
        filt = self.warp_filters.get(scale)
        w0 = self._warp(f0, up0, filt)
        w2 = self._warp(f2, up2, filt)
        parts = [self._cost(scale, w0, w2)] + list(feats) + [up0.offsets, up2.offsets]
        if up0.modulation is not None:
            parts += [up0.modulation, up2.modulation]
        parts.append(bilinear_resize(prev.features, h, w))
        out, pen = self.heads[scale](concat(parts), return_penultimate=True)
        d0, d2, m0, m2 = _split_head(out, cfg)
        fields = self._fields_from(add(up0.offsets, d0), add(up2.offsets, d2), m0, m2)
        return ScaleEstimate(scale, fields, pen)

    def single_scale_estimate(self, pyramids: PyramidFeatures) -> ScaleEstimate:
        """U-Net style decoder over the pyramid that predicts full-resolution
        fields directly (no intermediate warping or cost volumes)."""
        cfg = self.config
        L = cfg.num_scales
        x = None
        for s in range(L, 0, -1):
            feats = [p[s - 1] for p in pyramids]
            _, _, h, w = feats[0].shape
            parts = list(feats) + ([bilinear_resize(x, h, w)] if x is not None else [])
            if s > 1:
                x = self.heads[s](concat(parts))
            else:
                out, pen = self.heads[1](concat(parts), return_penultimate=True)
                return ScaleEstimate(1, self._fields_from(*_split_head(out, cfg)), pen)
        raise AssertionError("unreachable")

    def blend(self, frame0: Tensor, frame2: Tensor, finest: ScaleEstimate, feat0: Tensor, feat2: Tensor):
        """Warp frames and scale-1 features with the finest fields and mix the
        two warped frames with a per-pixel weight alpha.

        Returns (blended, alpha, warped frames, warped features).
        """
        if finest.scale != 1:
            raise ShapeError(f"blend needs the scale-1 estimate, got scale {finest.scale}")
        fa, fb = finest.fields
        i0 = self._warp(frame0, fa, self.frame_filter)
        i2 = self._warp(frame2, fb, self.frame_filter)
        g0 = self._warp(feat0, fa, self.feature_filter)
        g2 = self._warp(feat2, fb, self.feature_filter)
        if self.config.blending:
            weights = softmax_channels(self.blend_head(concat([i0, i2, g0, g2])))
            alpha = narrow(weights, 0, 1)
            blended = add(mul(expand_channels(alpha, 3), i0), mul(expand_channels(narrow(weights, 1, 1), 3), i2))
        else:
            b, _, h, w = frame0.shape
            alpha = Tensor(np.full((b, 1, h, w), 0.5), dtype=frame0.dtype)
            blended = blend_frames(i0, i2, alpha)
        return blended, alpha, (i0, i2), (g0, g2)

    def context_enhance(self, blended: Tensor, warped_frames, warped_feats) -> Tensor:
        """Residual refinement of the blended frame."""
        slope = self.config.leaky_slope
        x = concat([blended, warped_frames[0], warped_frames[1], warped_feats[0], warped_feats[1]])
        x = leaky_relu(self.context_in(x), slope)
        for conv_a, conv_b in self.context_blocks:
            x = add(x, conv_b(leaky_relu(conv_a(x), slope)))
        return add(blended, self.context_out(x))

    def forward(self, frames: Sequence[Tensor], context: bool | None = None) -> tuple[Tensor, Diagnostics]:
        """Interpolate the middle frame.

        ``frames`` are in temporal order.  ``context`` overrides the config's
        context-enhancement switch (used for the two-phase schedule).
        """
        cfg = self.config
        self._check_frames(frames)
        pyramids = self.encode_pyramid(frames)
        diag = Diagnostics()
        if cfg.coarse_to_fine:
            L = cfg.num_scales
            est = self.coarsest_estimate([p[L - 1] for p in pyramids])
            diag.estimates.append(est)
            for s in range(L - 1, 0, -1):
                est = self.refine_scale(est, [p[s - 1] for p in pyramids], s)
                diag.estimates.append(est)
        else:
            est = self.single_scale_estimate(pyramids)
            diag.estimates.append(est)
        frame0, frame2 = self._nearest(frames)
        p0, p2 = self._nearest(pyramids)
        blended, alpha, warped_frames, warped_feats = self.blend(frame0, frame2, est, p0[0], p2[0])
        diag.alpha, diag.blended = alpha, blended
        diag.warped_frames, diag.warped_features = warped_frames, warped_feats
        use_context = cfg.context_enhancement if context is None else context and cfg.context_enhancement
        out = self.context_enhance(blended, warped_frames, warped_feats) if use_context else blended
        return out, diag

    __call__ = forward


def blend_frames(warped0: Tensor, warped2: Tensor, alpha: Tensor) -> Tensor:
    """alpha * warped0 + (1 - alpha) * warped2 with a single-channel alpha."""
    c = warped0.shape[1]
    a = expand_channels(alpha, c)
    return add(mul(a, warped0), mul(affine(a, -1.0, 1.0), warped2))


def flow_variant(config: ArchConfig) -> ArchConfig:
    """The same network with single-flow backward warping in place of DConv."""
    return config.replace(warp="flow")


def frames_to_tensors(frames: Sequence[np.ndarray], dtype=np.float32) -> list[Tensor]:
    """(B, 3, H, W) or (3, H, W) arrays -> tensors."""
    out = []
    for f in frames:
        arr = np.asarray(f)
        if arr.ndim == 3:
            arr = arr[None]
        out.append(Tensor(arr, dtype=dtype))
    return out
