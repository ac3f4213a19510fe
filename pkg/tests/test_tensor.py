import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from pdwn import tensor as T
from pdwn.tensor import Adam, ParameterRegistry, ShapeError, Tensor, backward


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


small = st.floats(-10, 10, allow_nan=False, width=64)


def tensors(shape):
    return arrays(np.float64, shape, elements=small).map(Tensor)


# --- construction and shape contract -------------------------------------

def test_tensors_must_be_4d():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 4)))


def test_default_dtype_is_float32_and_switchable():
    assert Tensor(np.zeros((1, 1, 1, 1), dtype=int)).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([[[[1]]]]).dtype == np.float64
    assert T.get_default_dtype() == np.float32


def test_elementwise_rejects_mismatched_shapes_and_names_the_axis():
    with pytest.raises(ShapeError, match="width"):
        T.add(Tensor(np.zeros((1, 2, 3, 4))), Tensor(np.zeros((1, 2, 3, 5))))


def test_no_broadcasting():
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 2, 3, 3))))


def test_concat_is_channel_only():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 4, 3)))])


def test_every_op_is_registered():
    expected = {"add", "sub", "mul", "affine", "concat", "narrow", "expand_channels", "mean", "sum",
                "leaky_relu", "sigmoid", "softmax_channels", "conv2d", "max_pool2", "bilinear_resize",
                "deformable_warp", "flow_warp", "cost_volume", "learnt_cost", "l1_loss"}
    import pdwn.gradcheck  # noqa: F401  (pulls in every op-defining module)
    assert expected <= set(T.DIFFERENTIABLE_OPS)


# --- graph mechanics -------------------------------------------------------

def test_backward_needs_scalar_loss():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    with pytest.raises(ShapeError):
        backward(T.affine(x, 2.0))


def test_gradient_accumulates_over_shared_subgraph():
    x = t64(np.full((1, 1, 1, 1), 3.0), grad=True)
    y = T.mul(x, x)
    backward(T.add(y, y))
    assert x.grad.item() == pytest.approx(12.0)


def test_deep_chain_does_not_recurse():
    x = t64(np.ones((1, 1, 1, 1)), grad=True)
    y = x
    for _ in range(5000):
        y = T.affine(y, 1.0, 0.0)
    backward(y)
    assert x.grad.item() == 1.0


def test_registry_params_outside_the_graph_get_zero_grad():
    reg = ParameterRegistry()
    a = reg.add("a", np.ones((1, 1, 1, 1)))
    b = reg.add("b", np.ones((1, 1, 2, 2)))
    backward(T.affine(a, 5.0), reg)
    assert a.grad.item() == 5.0
    assert np.array_equal(b.grad, np.zeros((1, 1, 2, 2)))


def test_registry_rejects_duplicate_names():
    reg = ParameterRegistry()
    reg.add("w", np.zeros((1, 1, 1, 1)))
    with pytest.raises(KeyError):
        reg.add("w", np.zeros((1, 1, 1, 1)))


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["worker"] = T.grad_enabled()

    with T.no_grad():
        th = threading.Thread(target=worker)
        th.start()
        th.join()
        seen["main"] = T.grad_enabled()
    assert seen == {"worker": True, "main": False}
    assert T.grad_enabled()


def test_no_grad_records_nothing():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    with T.no_grad():
        y = T.affine(x, 2.0)
    assert not y.requires_grad and y.is_leaf


# --- oracle equivalence ----------------------------------------------------

@pytest.mark.parametrize("seed", range(50))
def test_conv2d_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    b, cin, cout = (int(v) for v in rng.integers(1, 4, size=3))
    h, w = (int(v) for v in rng.integers(k, k + 5, size=2))
    x = rng.standard_normal((b, cin, h, w))
    wt = rng.standard_normal((cout, cin, k, k))
    bias = rng.standard_normal((cout, 1, 1, 1))
    got = T.conv2d(t64(x), t64(wt), t64(bias), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, oracles.conv2d(x, wt, bias, stride, pad), atol=1e-5)


@pytest.mark.parametrize("seed", range(50))
def test_max_pool2_matches_nested_loops(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 8)), int(rng.integers(1, 8)))
    x = rng.standard_normal(shape)
    out = T.max_pool2(t64(x))
    np.testing.assert_allclose(out.data, oracles.max_pool2(x), atol=1e-5)
    assert out.meta["pad"] == (shape[2] % 2, shape[3] % 2)


def test_max_pool2_gradient_goes_to_first_maximum():
    x = t64(np.ones((1, 1, 2, 2)), grad=True)
    backward(T.sum_all(T.max_pool2(x)))
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), padding=1)


# --- resampling ------------------------------------------------------------

def test_resize_same_size_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 2, 5, 7))
    np.testing.assert_allclose(T.bilinear_resize(t64(x), 5, 7).data, x, atol=1e-12)


def test_resize_of_constant_is_constant():
    x = np.full((1, 1, 4, 6), 0.3)
    np.testing.assert_allclose(T.bilinear_resize(t64(x), 9, 3).data, 0.3, atol=1e-12)


def test_upsampled_ramp_stays_linear_away_from_borders():
    # half-pixel centres: x2 upsampling of a unit ramp is a ramp of slope 1/2
    ramp = np.arange(8, dtype=np.float64).reshape(1, 1, 1, 8).repeat(2, axis=2)
    up = T.bilinear_resize(t64(ramp), 4, 16).data[0, 0, 0]
    np.testing.assert_allclose(np.diff(up[1:-1]), 0.5, atol=1e-12)


def test_resize_matrix_rows_sum_to_one():
    for n_in, n_out in [(3, 7), (8, 4), (5, 5), (1, 4)]:
        np.testing.assert_allclose(T.resize_matrix(n_in, n_out).sum(axis=1), 1.0)


# --- properties ------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(tensors((2, 3, 2, 2)))
def test_softmax_is_a_distribution_over_channels(x):
    out = T.softmax_channels(x).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(tensors((1, 2, 3, 3)))
def test_sigmoid_is_bounded_and_odd_around_half(x):
    s = T.sigmoid(x).data
    s_neg = T.sigmoid(T.affine(x, -1.0)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + s_neg, 1.0, atol=1e-12)


def test_sigmoid_survives_extreme_inputs():
    x = t64(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]).reshape(1, 5, 1, 1))
    out = T.sigmoid(x).data.reshape(-1)
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0 and out[2] == 0.5 and out[-1] == 1.0


@settings(max_examples=40, deadline=None)
@given(tensors((1, 5, 2, 2)), st.integers(0, 4), st.integers(1, 5))
def test_narrow_of_concat_recovers_parts(x, start, length):
    if start + length > 5:
        length = 5 - start
    part = T.narrow(x, start, length).data
    np.testing.assert_array_equal(part, x.data[:, start:start + length])
    whole = T.concat([T.narrow(x, 0, start), T.narrow(x, start, 5 - start)] if start else [x]).data
    np.testing.assert_array_equal(whole, x.data)


@settings(max_examples=40, deadline=None)
@given(tensors((1, 2, 3, 3)))
def test_leaky_relu_is_identity_on_positive_and_scaled_on_negative(x):
    out = T.leaky_relu(x, 0.2).data
    np.testing.assert_allclose(out, np.where(x.data > 0, x.data, 0.2 * x.data))


# --- Adam ------------------------------------------------------------------

def test_adam_matches_scalar_reference():
    reg = ParameterRegistry()
    p = reg.add("p", np.array([[[[1.0]]]]), dtype=np.float64)
    opt = Adam(reg, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        g = 2 * theta  # d/dθ θ²
        p.grad = np.array([[[[2 * p.data.item()]]]])
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data.item() == pytest.approx(theta, rel=1e-12)


def test_adam_requires_gradients():
    reg = ParameterRegistry()
    reg.add("p", np.zeros((1, 1, 1, 1)))
    with pytest.raises(RuntimeError):
        Adam(reg).step()


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        Adam(ParameterRegistry(), lr=0.0)
