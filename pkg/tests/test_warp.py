import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pdwn import tensor as T
from pdwn import warp as W
from pdwn.tensor import ParameterRegistry, ShapeError, Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def test_tap_grid_is_row_major():
    assert W.tap_grid(3).tolist() == [[dy, dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    assert W.tap_grid(1).tolist() == [[0, 0]]


@pytest.mark.parametrize("seed", range(50))
def test_deformable_warp_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3]))
    b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(2, 7, size=2))
    feat = rng.standard_normal((b, cin, h, w))
    # wide spread so some samples land partly or wholly outside the image
    off = rng.uniform(-3.5, 3.5, size=(b, 2 * k * k, h, w))
    mod = rng.uniform(0, 1, size=(b, k * k, h, w)) if rng.random() < 0.7 else None
    wt = rng.standard_normal((cout, cin, k, k))
    field = W.OffsetField(t64(off), None if mod is None else t64(mod))
    got = W.deformable_warp(t64(feat), field, t64(wt)).data
    np.testing.assert_allclose(got, oracles.deformable_warp(feat, off, mod, wt), atol=1e-5)


@pytest.mark.parametrize("seed", range(50))
def test_cost_volume_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(1, 7, size=2))
    r = int(rng.integers(0, 3))
    norm = "k2" if rng.random() < 0.5 else "channels"
    left, right = rng.standard_normal((2, b, c, h, w))
    got = W.cost_volume(t64(left), t64(right), r, norm).data
    np.testing.assert_allclose(got, oracles.cost_volume(left, right, r, norm), atol=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_zero_offsets_unit_modulation_is_conv2d(seed):
    rng = np.random.default_rng(seed)
    feat = rng.standard_normal((2, 3, 6, 5))
    wt = rng.standard_normal((4, 3, 3, 3))
    field = W.OffsetField(t64(np.zeros((2, 18, 6, 5))), t64(np.ones((2, 9, 6, 5))))
    got = W.deformable_warp(t64(feat), field, t64(wt)).data
    np.testing.assert_allclose(got, T.conv2d(t64(feat), t64(wt), padding=1).data, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_flow_warp_is_one_tap_deformable_warp(seed):
    rng = np.random.default_rng(seed)
    feat = rng.standard_normal((1, 3, 5, 6))
    flow = t64(rng.uniform(-2.5, 2.5, size=(1, 2, 5, 6)))
    got = W.flow_warp(t64(feat), flow).data
    ref = W.deformable_warp(t64(feat), W.flow_as_field(flow), W.identity_filter(3, np.float64)).data
    np.testing.assert_allclose(got, ref, atol=1e-6)


def test_integer_flow_is_an_exact_shift():
    feat = np.arange(30, dtype=np.float64).reshape(1, 1, 5, 6)
    flow = np.zeros((1, 2, 5, 6))
    flow[:, 1] = 1.0  # sample one pixel to the right
    out = W.flow_warp(t64(feat), t64(flow)).data
    np.testing.assert_array_equal(out[..., :-1], feat[..., 1:])
    np.testing.assert_array_equal(out[..., -1], 0.0)  # beyond the border is zero


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
def test_flow_warp_is_linear_in_the_feature(dy, dx, a):
    rng = np.random.default_rng(0)
    f1, f2 = rng.standard_normal((2, 1, 2, 4, 4))
    flow = np.zeros((1, 2, 4, 4))
    flow[:, 0], flow[:, 1] = dy, dx
    lhs = W.flow_warp(t64(a * f1 + f2), t64(flow)).data
    rhs = a * W.flow_warp(t64(f1), t64(flow)).data + W.flow_warp(t64(f2), t64(flow)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_cost_volume_centre_channel_is_normalized_dot_product():
    rng = np.random.default_rng(3)
    left, right = rng.standard_normal((2, 1, 4, 5, 5))
    cv = W.cost_volume(t64(left), t64(right), 2).data
    assert cv.shape == (1, 25, 5, 5)
    np.testing.assert_allclose(cv[:, 12], (left * right).sum(axis=1) / 25)


def test_cost_volume_channel_layout():
    left = np.zeros((1, 1, 5, 5))
    right = np.zeros((1, 1, 5, 5))
    left[0, 0, 2, 2] = 1.0
    right[0, 0, 3, 1] = 1.0  # displacement dy=+1, dx=-1
    cv = W.cost_volume(t64(left), t64(right), 1, "channels").data
    d = (1 + 1) * 3 + (-1 + 1)
    assert cv[0, d, 2, 2] == 1.0
    assert cv.sum() == 1.0


def test_learnt_cost_output_width():
    reg = ParameterRegistry()
    net = W.LearntCost(reg, "c", 4, 2, 8, np.random.default_rng(0), dtype=np.float64)
    out = net(t64(np.zeros((1, 4, 6, 6))), t64(np.zeros((1, 4, 6, 6))))
    assert out.shape == (1, 25, 6, 6)


def test_identity_global_filter_with_half_modulation_reproduces_feature():
    reg = ParameterRegistry()
    filt = W.GlobalFilter(reg, "g", 3, 3, 3, identity_gain=2.0, dtype=np.float64)
    feat = np.random.default_rng(1).standard_normal((1, 3, 4, 4))
    field = W.OffsetField(t64(np.zeros((1, 18, 4, 4))), t64(np.full((1, 9, 4, 4), 0.5)))
    np.testing.assert_allclose(W.deformable_warp(t64(feat), field, filt).data, feat)


def test_mean_offset_of_uniform_shift():
    off = np.zeros((1, 18, 3, 3))
    off[:, 0::2] = 1.5
    off[:, 1::2] = -0.5
    mean = W.mean_offset(W.OffsetField(t64(off), t64(np.ones((1, 9, 3, 3))))).data
    np.testing.assert_allclose(mean[0, 0], 1.5, atol=1e-6)
    np.testing.assert_allclose(mean[0, 1], -0.5, atol=1e-6)


def test_offset_field_validates_channels():
    with pytest.raises(ShapeError):
        W.OffsetField(t64(np.zeros((1, 18, 2, 2))), t64(np.zeros((1, 8, 2, 2))))


def test_deformable_warp_rejects_wrong_tap_count():
    field = W.OffsetField(t64(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ShapeError, match="offset channels"):
        W.deformable_warp(t64(np.zeros((1, 1, 3, 3))), field, t64(np.zeros((1, 1, 3, 3))))
