"""Dense 4-D tensors with reverse-mode differentiation.

Every tensor is shaped ``(batch, channels, height, width)``.  There is no
broadcasting: elementwise ops require identical shapes and concatenation
is only defined along the channel axis.  Each op records a closure that maps
the output gradient to gradients of its inputs; :func:`backward` walks the
recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.dtype(np.float32)
_state = threading.local()

# name -> op function; gradcheck enumerates this to make sure each op is covered
DIFFERENTIABLE_OPS: "OrderedDict[str, Callable]" = OrderedDict()


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an op's contract."""


def differentiable(name: str):
    def register(fn):
        DIFFERENTIABLE_OPS[name] = fn
        return fn

    return register


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """A node in the differentiation graph.

    ``data`` is a 4-D numpy array.  ``grad`` is populated by :func:`backward`
    on leaves that require gradients.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are 4-D (batch, channels, height, width); got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.meta: dict = {}
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, registry: "ParameterRegistry | None" = None) -> None:
        backward(self, registry)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return affine(self, -1.0, 0.0)


class Parameter(Tensor):
    """A named trainable leaf."""

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


class ParameterRegistry:
    """Ordered, name-unique collection of parameters."""

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()

    def add(self, name: str, data, dtype=None) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(data, name, dtype=dtype)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def count(self) -> int:
        """Total number of scalar values."""
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self._params.items())

    def load_state(self, state) -> None:
        for name, arr in state.items():
            p = self._params[name]
            if p.data.shape != tuple(arr.shape):
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} does not match {p.data.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)


# ---------------------------------------------------------------------------
# graph plumbing


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, registry: ParameterRegistry | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``registry`` is given, its parameters that the loss does not reach
    receive an explicit zero gradient.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar-shaped (1,1,1,1) loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if registry is not None:
        for p in registry:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _same_shape(op: str, *tensors: Tensor) -> None:
    ref = tensors[0].shape
    for i, t in enumerate(tensors[1:], start=1):
        if t.shape != ref:
            dims = [n for n, a, b in zip(("batch", "channels", "height", "width"), ref, t.shape) if a != b]
            raise ShapeError(f"{op}: operand {i} shape {t.shape} differs from {ref} in {', '.join(dims)}")


# ---------------------------------------------------------------------------
# elementwise and structural ops


@differentiable("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


@differentiable("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


@differentiable("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


@differentiable("affine")
def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` for python scalars."""
    s = x.dtype.type(scale)
    out = x.data * s
    if shift:
        out = out + x.dtype.type(shift)
    return _make(out, (x,), lambda g: (g * s,), "affine")


def scale(x: Tensor, factor: float) -> Tensor:
    return affine(x, factor, 0.0)


@differentiable("concat")
def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along channels."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    b, _, h, w = tensors[0].shape
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (b, h, w):
            raise ShapeError(f"concat: shape {t.shape} incompatible with batch/spatial ({b}, {h}, {w})")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([t.data for t in tensors], axis=1), tensors, back, "concat")


@differentiable("narrow")
def narrow(x: Tensor, start: int, length: int) -> Tensor:
    """Channels ``start:start+length``."""
    c = x.shape[1]
    if start < 0 or length < 1 or start + length > c:
        raise ShapeError(f"narrow: channels [{start}, {start + length}) out of range for {c} channels")

    def back(g):
        full = np.zeros_like(x.data)
        full[:, start:start + length] = g
        return (full,)

    return _make(x.data[:, start:start + length].copy(), (x,), back, "narrow")


@differentiable("expand_channels")
def expand_channels(x: Tensor, n: int) -> Tensor:
    """Repeat a single-channel tensor ``n`` times along channels."""
    if x.shape[1] != 1:
        raise ShapeError(f"expand_channels needs 1 channel, got {x.shape[1]}")
    return _make(np.repeat(x.data, n, axis=1), (x,), lambda g: (g.sum(axis=1, keepdims=True),), "expand")


@differentiable("mean")
def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.full((1, 1, 1, 1), x.data.mean(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.full_like(x.data, g.reshape(-1)[0] / n),), "mean")


@differentiable("sum")
def sum_all(x: Tensor) -> Tensor:
    out = np.full((1, 1, 1, 1), x.data.sum(dtype=np.float64), dtype=x.dtype)
    return _make(out, (x,), lambda g: (np.full_like(x.data, g.reshape(-1)[0]),), "sum")


@differentiable("leaky_relu")
def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    s = x.dtype.type(slope)
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * s)
    return _make(out, (x,), lambda g: (np.where(positive, g, g * s),), "leaky_relu")


@differentiable("sigmoid")
def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


@differentiable("softmax_channels")
def softmax_channels(x: Tensor) -> Tensor:
    if x.shape[1] < 2:
        raise ShapeError(f"softmax_channels needs >= 2 channels, got {x.shape[1]}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


# ---------------------------------------------------------------------------
# convolution and resampling


def _tap(xh: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Input pixels seen by kernel tap (i, j), as rows of (B*Ho*Wo, C)."""
    view = xh[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
    return view.reshape(-1, xh.shape[3])


@differentiable("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with square kernels; ``bias`` is shaped (C_out, 1, 1, 1)."""
    cout, cin, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight input channels {cin}")
    if bias is not None and bias.shape != (cout, 1, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout}, 1, 1, 1)")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh} larger than padded input {x.shape[2:]}")
    b, _, h, w = x.shape
    # channels-last with padding; one (pixels, C) @ (C, C_out) product per tap
    xh = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (k, k, C_in, C_out)
    out = np.zeros((b * ho * wo, cout), dtype=np.result_type(x.data, weight.data))
    for i in range(kh):
        for j in range(kw):
            out += _tap(xh, i, j, stride, ho, wo) @ taps[i, j]
    if bias is not None:
        out += bias.data.reshape(1, cout)
    out = np.ascontiguousarray(out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gxh = np.zeros_like(xh) if x.requires_grad else None
        gtaps = np.empty_like(taps) if weight.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gtaps is not None:
                    gtaps[i, j] = _tap(xh, i, j, stride, ho, wo).T @ gm
                if gxh is not None:
                    gxh[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                        (gm @ taps[i, j].T).reshape(b, ho, wo, cin)
        gx = None
        if gxh is not None:
            gx = np.ascontiguousarray(gxh[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2))
        gw = None if gtaps is None else np.ascontiguousarray(gtaps.transpose(3, 2, 0, 1))
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0).reshape(cout, 1, 1, 1)

    return _make(out, parents, back, "conv2d")


@differentiable("max_pool2")
def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Odd sizes are edge-replicated on the
    bottom/right first; the padding is recorded in ``out.meta["pad"]``."""
    b, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    data = x.data
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    hh, ww = data.shape[2] // 2, data.shape[3] // 2
    windows = data.reshape(b, c, hh, 2, ww, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hh, ww, 4)
    arg = windows.argmax(axis=-1)  # first maximum in row-major window order
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros((b, c, hh, ww, 4), dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gp = gw.reshape(b, c, hh, ww, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * hh, 2 * ww)
        if ph:
            gp[:, :, h - 1, :] += gp[:, :, h, :]
        if pw:
            gp[:, :, :, w - 1] += gp[:, :, :, w]
        return (np.ascontiguousarray(gp[:, :, :h, :w]),)

    out_t = _make(out, (x,), back, "max_pool2")
    out_t.meta["pad"] = (ph, pw)
    return out_t


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the bilinear weights of output sample i (half-pixel centres,
    source coordinate clamped to the valid range)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


@differentiable("bilinear_resize")
def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,), "resize")
    my = resize_matrix(h, out_h, x.dtype)
    mx = resize_matrix(w, out_w, x.dtype)
    out = np.matmul(my, x.data @ mx.T)

    def back(g):
        return (np.matmul(my.T, g) @ mx,)

    return _make(out, (x,), back, "resize")


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, params: ParameterRegistry, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (n, np.zeros_like(p.data)) for n, p in params.items())
        self.v: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (n, np.zeros_like(p.data)) for n, p in params.items())

    def step(self) -> None:
        if all(p.grad is None for p in self.params):
            raise RuntimeError("adam step called before backward: no parameter holds a gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            dt = p.data.dtype.type
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * (g * g)
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data -= dt(self.lr) * update

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, t: int, m, v) -> None:
        self.t = int(t)
        for name in self.m:
            self.m[name] = np.array(m[name], dtype=self.params[name].data.dtype)
            self.v[name] = np.array(v[name], dtype=self.params[name].data.dtype)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=requires_grad)
