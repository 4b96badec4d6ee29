"""Bias-corrected Adam over lists of tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Moments:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "Moments":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], moments: Moments, config: AdamConfig
) -> list[np.ndarray]:
    """One Adam update. ``params`` are modified in place and also returned.

    A ``None`` gradient counts as zero. Moments accumulate in the parameter dtype.
    """
    moments.step += 1
    t = moments.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1**t, 1 - b2**t
    for p, g, m, v in zip(params, grads, moments.m, moments.v):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(p.dtype)
    return list(params)


class Adam:
    def __init__(self, params: Sequence[Tensor], config: AdamConfig = AdamConfig()):
        self.params = list(params)
        self.config = config
        self.moments = Moments.zeros([p.data for p in self.params])

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.moments, self.config)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        state = {f"{prefix}.step": np.array([self.moments.step], dtype=np.uint64)}
        for i, (m, v) in enumerate(zip(self.moments.m, self.moments.v)):
            state[f"{prefix}.m.{i}"] = m
            state[f"{prefix}.v.{i}"] = v
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str) -> None:
        m, v = [], []
        for i, p in enumerate(self.params):
            mi, vi = state[f"{prefix}.m.{i}"], state[f"{prefix}.v.{i}"]
            if mi.shape != p.shape or vi.shape != p.shape:
                raise ValueError(f"{prefix} moment {i}: shape {mi.shape} != {p.shape}")
            m.append(mi.astype(p.dtype))
            v.append(vi.astype(p.dtype))
        self.moments = Moments(m, v, int(state[f"{prefix}.step"][0]))
