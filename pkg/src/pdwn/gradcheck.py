"""Central finite-difference checks for every registered differentiable op.

Each entry of :data:`CASES` builds a small random float64 instance of one op
and returns ``(fn, inputs)`` where ``fn(*inputs)`` yields a tensor.  The check
projects the output on a fixed random tensor, backpropagates, and compares the
analytic gradient of every input with central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import warp  # noqa: F401  (registers warp ops)
from .tensor import DIFFERENTIABLE_OPS, ParameterRegistry, Tensor, backward, mul, sum_all
from . import tensor as T
from .train import l1_loss

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    passed: bool
    seconds: float


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numerical_gradient(fn: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = fn()
        flat[i] = orig - step
        minus = fn()
        flat[i] = orig
        out[i] = (plus - minus) / (2 * step)
    return grad


def check(fn: Callable[..., Tensor], inputs: list[Tensor], seed: int = 0,
          step: float = STEP) -> float:
    """Largest relative gradient error over all inputs that require grad."""
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    proj = Tensor(rng.standard_normal(out.shape), dtype=np.float64)

    def objective() -> float:
        with T.no_grad():
            return float((fn(*inputs).data * proj.data).sum())

    for t in inputs:
        t.grad = None
    backward(sum_all(mul(fn(*inputs), proj)))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        numeric = numerical_gradient(objective, t.data, step)
        worst = max(worst, relative_error(t.grad, numeric))
    return worst


def _t(rng, *shape, low=None, high=None, grad=True):
    if low is None:
        data = rng.standard_normal(shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=grad, dtype=np.float64)


def _fractional_offsets(rng, b, channels, h, w, spread=2.0):
    """Offsets whose sampling positions stay away from integers."""
    whole = rng.integers(-int(spread), int(spread) + 1, size=(b, channels, h, w))
    frac = rng.uniform(0.15, 0.85, size=(b, channels, h, w))
    return Tensor(whole + frac, requires_grad=True, dtype=np.float64)


def _case_conv2d(rng):
    x, w, b = _t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4, 1, 1, 1)
    return (lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1)), [x, w, b]


def _case_conv2d_strided(rng):
    x, w, b = _t(rng, 1, 2, 7, 6), _t(rng, 3, 2, 3, 3), _t(rng, 3, 1, 1, 1)
    return (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1)), [x, w, b]


def _case_leaky(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    return (lambda x: T.leaky_relu(x, 0.1)), [Tensor(x, requires_grad=True, dtype=np.float64)]


def _case_maxpool(rng):
    return T.max_pool2, [_t(rng, 2, 2, 6, 5)]


def _case_resize_up(rng):
    return (lambda x: T.bilinear_resize(x, 7, 9)), [_t(rng, 1, 2, 4, 5)]


def _case_resize_down(rng):
    return (lambda x: T.bilinear_resize(x, 3, 2)), [_t(rng, 2, 1, 6, 5)]


def _case_sigmoid(rng):
    return T.sigmoid, [_t(rng, 2, 3, 3, 3)]


def _case_softmax(rng):
    return T.softmax_channels, [_t(rng, 2, 3, 4, 4)]


def _case_add(rng):
    return T.add, [_t(rng, 1, 2, 3, 3), _t(rng, 1, 2, 3, 3)]


def _case_sub(rng):
    return T.sub, [_t(rng, 1, 2, 3, 3), _t(rng, 1, 2, 3, 3)]


def _case_mul(rng):
    return T.mul, [_t(rng, 1, 2, 3, 3), _t(rng, 1, 2, 3, 3)]


def _case_affine(rng):
    return (lambda x: T.affine(x, -1.7, 0.3)), [_t(rng, 1, 2, 3, 3)]


def _case_concat(rng):
    return (lambda a, b: T.concat([a, b])), [_t(rng, 1, 2, 3, 3), _t(rng, 1, 3, 3, 3)]


def _case_narrow(rng):
    return (lambda x: T.narrow(x, 1, 2)), [_t(rng, 1, 4, 3, 3)]


def _case_expand(rng):
    return (lambda x: T.expand_channels(x, 3)), [_t(rng, 2, 1, 3, 3)]


def _case_mean(rng):
    return T.mean, [_t(rng, 2, 2, 3, 3)]


def _case_sum(rng):
    return T.sum_all, [_t(rng, 2, 2, 3, 3)]


def _case_deformable(rng):
    feat = _t(rng, 1, 2, 6, 6)
    off = _fractional_offsets(rng, 1, 18, 6, 6)
    mod = _t(rng, 1, 9, 6, 6, low=0.1, high=0.9)
    w = _t(rng, 3, 2, 3, 3)
    fn = lambda f, o, m, w: warp.deformable_warp(f, warp.OffsetField(o, m), w)  # noqa: E731
    return fn, [feat, off, mod, w]


def _case_flow(rng):
    feat = _t(rng, 2, 2, 5, 6)
    flow = _fractional_offsets(rng, 2, 2, 5, 6)
    return warp.flow_warp, [feat, flow]


def _case_cost(rng):
    return (lambda a, b: warp.cost_volume(a, b, 2)), [_t(rng, 1, 3, 5, 5), _t(rng, 1, 3, 5, 5)]


def _case_learnt_cost(rng):
    registry = ParameterRegistry()
    net = warp.LearntCost(registry, "cost", 2, 1, 4, rng, dtype=np.float64)
    # parameters are perturbed in place, so the net sees every probe
    fn = lambda a, b, *params: warp.learnt_cost(a, b, net)  # noqa: E731
    return fn, [_t(rng, 1, 2, 4, 4), _t(rng, 1, 2, 4, 4)] + list(registry)


def _case_l1(rng):
    pred = _t(rng, 1, 3, 4, 4)
    target = Tensor(pred.data + rng.choice([-1.0, 1.0], size=pred.shape) * rng.uniform(0.05, 1.0, pred.shape),
                    dtype=np.float64)
    return l1_loss, [pred, target]


CASES: dict[str, list[Callable]] = {
    "conv2d": [_case_conv2d, _case_conv2d_strided],
    "leaky_relu": [_case_leaky],
    "max_pool2": [_case_maxpool],
    "bilinear_resize": [_case_resize_up, _case_resize_down],
    "sigmoid": [_case_sigmoid],
    "softmax_channels": [_case_softmax],
    "add": [_case_add],
    "sub": [_case_sub],
    "mul": [_case_mul],
    "affine": [_case_affine],
    "concat": [_case_concat],
    "narrow": [_case_narrow],
    "expand_channels": [_case_expand],
    "mean": [_case_mean],
    "sum": [_case_sum],
    "deformable_warp": [_case_deformable],
    "flow_warp": [_case_flow],
    "cost_volume": [_case_cost],
    "learnt_cost": [_case_learnt_cost],
    "l1_loss": [_case_l1],
}


def uncovered_ops() -> list[str]:
    """Registered differentiable ops that have no gradient case."""
    return [name for name in DIFFERENTIABLE_OPS if name not in CASES]


def run_case(name: str, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    worst = 0.0
    for i, build in enumerate(CASES[name]):
        rng = np.random.default_rng(seed * 1000 + i)
        fn, inputs = build(rng)
        worst = max(worst, check(fn, inputs, seed=seed + i))
    return CheckResult(name, worst, worst < TOLERANCE, time.perf_counter() - start)


def run_all(seed: int = 0) -> list[CheckResult]:
    missing = uncovered_ops()
    if missing:
        raise RuntimeError(f"differentiable ops without a gradient check: {', '.join(missing)}")
    return [run_case(name, seed) for name in DIFFERENTIABLE_OPS]
