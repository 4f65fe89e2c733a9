"""Minimal module system and layers on top of :mod:`ivct.autograd`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .autograd import Tensor, conv2d, conv_transpose2d, relu
from .autograd.tensor import matmul, add


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by redrawing."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Parameter container; children and parameters are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


class Conv2d(Module):
    def __init__(
        self,
        rng,
        c_in: int,
        c_out: int,
        kernel: int = 1,
        stride: int = 1,
        groups: int = 1,
        bias: bool = True,
        pad_mode: str = "reflect",
        padding: int | str = "same",
        dtype=np.float32,
    ):
        self.weight = parameter(trunc_normal(rng, (c_out, c_in // groups, kernel, kernel), dtype=dtype))
        self.bias = parameter(np.zeros(c_out, dtype)) if bias else None
        self.stride = stride
        self.groups = groups
        self.pad_mode = pad_mode
        self.padding = padding if kernel > 1 else 0

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.pad_mode, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int = 2, stride: int = 2, dtype=np.float32):
        self.weight = parameter(trunc_normal(rng, (c_in, c_out, kernel, kernel), dtype=dtype))
        self.bias = parameter(np.zeros(c_out, dtype))
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride)


class Linear(Module):
    """Dense layer on the last axis: ``x @ W + b`` with ``W`` of shape (d_in, d_out)."""

    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True, dtype=np.float32):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out), dtype=dtype))
        self.bias = parameter(np.zeros(d_out, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


class MLP(Module):
    """Two 1x1 convolutions with a ReLU in between."""

    def __init__(self, rng, dim: int, ratio: float, dtype=np.float32):
        hidden = max(1, int(round(dim * ratio)))
        self.fc1 = Conv2d(rng, dim, hidden, dtype=dtype)
        self.fc2 = Conv2d(rng, hidden, dim, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(x)))
