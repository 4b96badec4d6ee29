"""70x70 PatchGAN discriminator (the CycleGAN layer stack)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor

RECEPTIVE_FIELD = 70
KERNEL, PADDING = 4, 1
STRIDES = (2, 2, 2, 1, 1)


def score_map_extent(size: int) -> int:
    """Spatial extent of the score map for a ``size`` x ``size`` input."""
    for s in STRIDES:
        size = (size + 2 * PADDING - KERNEL) // s + 1
    return size


class Discriminator(Module):
    """conv(64, s2) -> [conv(128, s2), conv(256, s2), conv(512, s1)] each
    instance-normalized -> conv(1, s1); leaky-ReLU(0.2) in between.

    The output is a raw score per overlapping 70x70 patch.
    """

    def __init__(self, input_channels: int = 1, width: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        widths = [input_channels, width, 2 * width, 4 * width, 8 * width]
        # biases feeding an affine-free instance norm would be cancelled exactly
        self.convs = [
            Conv2d(widths[i], widths[i + 1], KERNEL, STRIDES[i], PADDING, bias=(i == 0), rng=rng)
            for i in range(4)
        ]
        self.score = Conv2d(widths[-1], 1, KERNEL, STRIDES[4], PADDING, rng=rng)
        self.input_channels = input_channels

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != self.input_channels:
            raise ShapeError(f"discriminator expects (N, {self.input_channels}, S, S), got {x.shape}")
        if min(x.shape[2:]) < RECEPTIVE_FIELD:
            raise ShapeError(
                f"discriminator input {x.shape[2]}x{x.shape[3]} is smaller than its "
                f"{RECEPTIVE_FIELD}x{RECEPTIVE_FIELD} receptive field"
            )
        h = T.leaky_relu(self.convs[0](x), 0.2)
        for conv in self.convs[1:]:
            h = T.leaky_relu(T.instance_norm(conv(h)), 0.2)
        return self.score(h)

    discriminate = forward
