"""Parameterised building blocks shared by the network modules."""

from __future__ import annotations

import numpy as np

from .tensor import ParameterRegistry, Tensor, conv2d, leaky_relu


class Conv2d:
    """Square-kernel 'same' convolution with bias.

    Weights are drawn from U(-b, b) with b = gain * sqrt(1/fan_in), biases
    from U(-sqrt(1/fan_in), sqrt(1/fan_in)); ``zero=True`` starts both at
    zero (used for prediction heads).
    """

    def __init__(self, registry: ParameterRegistry, name: str, in_channels: int, out_channels: int,
                 kernel_size: int, rng: np.random.Generator, zero: bool = False, dtype=np.float32,
                 gain: float = 1.0):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.padding = kernel_size // 2
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero:
            w = np.zeros(shape)
            b = np.zeros((out_channels, 1, 1, 1))
        else:
            bound = np.sqrt(1.0 / (in_channels * kernel_size * kernel_size))
            w = rng.uniform(-gain * bound, gain * bound, size=shape)
            b = rng.uniform(-bound, bound, size=(out_channels, 1, 1, 1))
        self.weight = registry.add(f"{name}.weight", w, dtype=dtype)
        self.bias = registry.add(f"{name}.bias", b, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


def init_gain(scheme: str, slope: float) -> float:
    """Weight-bound multiplier: 1 for plain fan-in scaling, the leaky-ReLU
    variance-preserving value for "he"."""
    if scheme == "he":
        return float(np.sqrt(6.0 / (1.0 + slope ** 2)))
    return 1.0


class ConvStack:
    """Convolutions with leaky-ReLU after every layer except (optionally) the last."""

    def __init__(self, registry: ParameterRegistry, name: str, widths: list[int], kernel_size: int,
                 rng: np.random.Generator, slope: float, activate_last: bool = True,
                 zero_last: bool = False, dtype=np.float32, gain: float = 1.0):
        self.slope = slope
        self.activate_last = activate_last
        self.layers = []
        n = len(widths) - 1
        for i in range(n):
            zero = zero_last and i == n - 1
            self.layers.append(Conv2d(registry, f"{name}.{i}", widths[i], widths[i + 1], kernel_size,
                                      rng, zero=zero, dtype=dtype, gain=gain))

    def __call__(self, x: Tensor, return_penultimate: bool = False):
        penultimate = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.activate_last:
                x = leaky_relu(x, self.slope)
            if i == last - 1:
                penultimate = x
        if return_penultimate:
            return x, penultimate
        return x
