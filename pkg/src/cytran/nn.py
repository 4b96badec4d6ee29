"""Minimal module system: named parameters, buffers and train/eval modes."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Module:
    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and not name.startswith("_"):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (own.keys() | bufs.keys()) - state.keys()
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)[:5]}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in bufs.items():
            b[...] = state[name]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(shape, rng: np.random.Generator | None, std: float = INIT_STD) -> Tensor:
    dtype = T.get_default_dtype()
    if rng is None:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, groups=1, bias=True, rng=None):
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = _param((cout, cin // groups, k, k), rng)
        self.bias = _param((cout,), None) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class TransposedConv2d(Module):
    def __init__(self, cin, cout, k, stride=1, padding=0, output_padding=0, bias=True, rng=None):
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.weight = _param((cin, cout, k, k), rng)
        self.bias = _param((cout,), None) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.transposed_conv2d(
            x, self.weight, self.bias, self.stride, self.padding, self.output_padding
        )


class BatchNorm2d(Module):
    """Per-channel batch normalization; ``shift=False`` drops the learnable offset."""

    def __init__(
        self, channels: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS, shift: bool = True
    ):
        dtype = T.get_default_dtype()
        self.momentum, self.eps = momentum, eps
        self.weight = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=shift)
        if shift:
            self.bias = beta
        else:
            self._fixed_shift = beta
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        beta = getattr(self, "bias", None) or self._fixed_shift
        return T.batch_norm(
            x, self.weight, beta, self.running_mean, self.running_var,
            self.training, self.momentum, self.eps,
        )
