"""Minimal module system: parameters, layers and containers."""
from __future__ import annotations

import numpy as np

from . import functional as fn
from .tensor import DEFAULT_DTYPE, Tensor, leaky_relu, tanh


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_bytes(self) -> int:
        return sum(p.data.nbytes for p in self.parameters())

    def to(self, dtype):
        """Cast every parameter to `dtype` in place; returns self."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


class Identity(Module):
    def forward(self, x):
        return x


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)


class Conv3d(Module):
    """3-D convolution; weights drawn N(0, init_std), bias zero.

    ``zero_init`` zeroes the weights as well (used for residual branches
    that must start as the identity).
    """

    def __init__(self, in_channels, out_channels, kernel_size, *, rng, stride=1, padding=0,
                 bias=True, init_std=0.02, zero_init=False, dtype=DEFAULT_DTYPE):
        k = kernel_size
        shape = (out_channels, in_channels, k, k, k)
        if zero_init:
            w = np.zeros(shape)
        else:
            w = rng.normal(0.0, init_std, size=shape)
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return fn.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class InstanceNorm3d(Module):
    def __init__(self, channels, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.eps = eps

    def forward(self, x):
        return fn.instance_norm3d(x, self.weight, self.bias, self.eps)


class LeakyReLU(Module):
    def __init__(self, slope=0.2):
        self.slope = slope

    def forward(self, x):
        return leaky_relu(x, self.slope)


class Tanh(Module):
    def forward(self, x):
        return tanh(x)


class AvgPool3d(Module):
    def __init__(self, factors):
        self.factors = tuple(factors)

    def forward(self, x):
        return fn.avg_pool3d(x, self.factors)


class UpsampleNearest(Module):
    def __init__(self, factors):
        self.factors = tuple(factors)

    def forward(self, x):
        return fn.upsample_nearest(x, self.factors)
