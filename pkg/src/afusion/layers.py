"""Parameter containers on top of the tape."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Walks attributes in definition order to enumerate parameters."""

    group = 0

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{name}.{i}.")


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, d_out))
        self.weight = param(w.astype(dtype))
        self.bias = param(np.zeros(d_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, stride: int, padding: int,
                 rng: np.random.Generator, dtype=np.float32):
        fan_in = c_in * k * k
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)).astype(dtype))
        self.bias = param(np.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class CausalConv1d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, dilation: int,
                 rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        if dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        if zero:
            w = np.zeros((k, c_in, c_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (k * c_in)), size=(k, c_in, c_out))
        self.weight = param(w.astype(dtype))
        self.bias = param(np.zeros(c_out, dtype=dtype))
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d_dilated_causal(x, self.weight, self.bias, self.dilation)
