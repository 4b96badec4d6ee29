"""Generative convolutional transformer.

Downsampling block -> convolutional transformer block(s) -> upsampling block.
Queries, keys and values come from depthwise-separable convolutional
projections of the token grid instead of linear maps; the MLP of a vanilla
transformer is replaced by two pointwise convolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module, TransposedConv2d
from .tensor import ShapeError, Tensor

# Learnable parameters of GeneratorConfig() at image_size 512.
EXPECTED_PARAMETERS = 3_530_369


@dataclass(frozen=True)
class GeneratorConfig:
    input_channels: int = 1
    base_width: int = 32
    transformer_channels: int = 128
    heads: int = 6
    head_dim: int = 64
    pointwise_channels: int = 512
    n_blocks: int = 9
    image_size: int = 512

    def __post_init__(self):
        if self.image_size % 8:
            raise ValueError(f"image_size must be divisible by 8, got {self.image_size}")
        if min(self.base_width, self.transformer_channels, self.heads, self.head_dim) < 1:
            raise ValueError("generator widths must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // 8

    @property
    def n_queries(self) -> int:
        return self.grid * self.grid

    @property
    def n_keys(self) -> int:
        return ((self.grid + 1) // 2) ** 2

    def scaled(self, divisor: int, **overrides) -> "GeneratorConfig":
        """Same topology with every channel width divided by ``divisor``."""
        return replace(
            self,
            base_width=max(1, self.base_width // divisor),
            transformer_channels=max(1, self.transformer_channels // divisor),
            head_dim=max(1, self.head_dim // divisor),
            pointwise_channels=max(1, self.pointwise_channels // divisor),
            **overrides,
        )


class ConvProjection(Module):
    """Depthwise 3x3 conv -> batch-norm -> pointwise conv, flattened to tokens."""

    def __init__(
        self, channels: int, out_dim: int, stride: int, rng: np.random.Generator, bias: bool = True
    ):
        self.depthwise = Conv2d(channels, channels, 3, stride, 1, groups=channels, bias=False, rng=rng)
        self.norm = BatchNorm2d(channels, shift=bias)
        self.pointwise = Conv2d(channels, out_dim, 1, bias=bias, rng=rng)

    def forward(self, t: Tensor) -> Tensor:
        z = self.pointwise(self.norm(self.depthwise(t)))
        n, d, h, w = z.shape
        return T.transpose(T.reshape(z, (n, d, h * w)), (0, 2, 1))


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) over the key axis."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    kt = T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    return T.softmax(T.scale(T.matmul(q, kt), 1 / math.sqrt(q.shape[-1])), axis=-1)


def self_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention. Shapes (..., n_q, d), (..., n_k, d), (..., n_k, d_v)."""
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    return T.matmul(attention_weights(q, k), v)


class AttentionHead(Module):
    def __init__(self, channels: int, head_dim: int, rng: np.random.Generator):
        self.query = ConvProjection(channels, head_dim, 1, rng)
        # any constant added to the keys shifts all logits of a query equally and
        # cancels in the softmax, so the key path carries no additive terms
        self.key = ConvProjection(channels, head_dim, 2, rng, bias=False)
        self.value = ConvProjection(channels, head_dim, 2, rng)

    def forward(self, t: Tensor) -> Tensor:
        n, _, h, w = t.shape
        z = self_attention(self.query(t), self.key(t), self.value(t))
        return T.reshape(T.transpose(z, (0, 2, 1)), (n, z.shape[2], h, w))


class TransformerBlock(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        c = cfg.transformer_channels
        self.heads = [AttentionHead(c, cfg.head_dim, rng) for _ in range(cfg.heads)]
        # bias-free: a batch-norm follows the residual sum
        self.merge = Conv2d(cfg.heads * cfg.head_dim, c, 1, bias=False, rng=rng)
        self.norm = BatchNorm2d(c)
        self.expand = Conv2d(c, cfg.pointwise_channels, 1, rng=rng)
        self.contract = Conv2d(cfg.pointwise_channels, c, 1, rng=rng)

    def attend(self, t: Tensor) -> Tensor:
        return self.merge(T.concat([head(t) for head in self.heads], axis=1))

    def forward(self, t: Tensor) -> Tensor:
        s = t + self.attend(t)
        return s + self.contract(T.gelu(self.expand(self.norm(s))))


class Generator(Module):
    def __init__(self, cfg: GeneratorConfig | None = None, seed: int = 0):
        cfg = cfg or GeneratorConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        b, c = cfg.base_width, cfg.transformer_channels
        self.stem = Conv2d(cfg.input_channels, b, 7, 1, 3, bias=False, rng=rng)
        self.stem_norm = BatchNorm2d(b)
        widths = [b, b, 2 * b, c]
        self.down = [Conv2d(widths[i], widths[i + 1], 3, 2, 1, bias=False, rng=rng) for i in range(3)]
        self.down_norms = [BatchNorm2d(widths[i + 1]) for i in range(3)]
        self.blocks = [TransformerBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        up = [c, c, 2 * b, b]
        self.up = [
            TransposedConv2d(up[i], up[i + 1], 3, 2, 1, output_padding=1, bias=False, rng=rng)
            for i in range(3)
        ]
        self.up_norms = [BatchNorm2d(up[i + 1]) for i in range(3)]
        self.head = Conv2d(b, cfg.input_channels, 7, 1, 3, rng=rng)

    def _check_input(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1:] != (self.cfg.input_channels, s, s):
            raise ShapeError(
                f"generator expects (N, {self.cfg.input_channels}, {s}, {s}), got {x.shape}"
            )
        return x

    def downsample(self, x: Tensor) -> Tensor:
        x = self._check_input(x)
        h = T.relu(self.stem_norm(self.stem(x)))
        for conv, norm in zip(self.down, self.down_norms):
            h = T.relu(norm(conv(h)))
        return h

    def _check_grid(self, t: Tensor) -> None:
        g, c = self.cfg.grid, self.cfg.transformer_channels
        if t.ndim != 4 or t.shape[1:] != (c, g, g):
            raise ShapeError(f"transformer grid must be (N, {c}, {g}, {g}), got {t.shape}")

    def conv_projection(self, t: Tensor, which: str, head: int, block: int = 0) -> Tensor:
        self._check_grid(t)
        if not 0 <= head < self.cfg.heads:
            raise IndexError(f"head {head} out of range [0, {self.cfg.heads})")
        proj = {"Q": "query", "K": "key", "V": "value"}.get(which.upper())
        if proj is None:
            raise ValueError(f"projection must be Q, K or V, got {which!r}")
        return getattr(self.blocks[block].heads[head], proj)(t)

    def transformer_block(self, t: Tensor, block: int = 0) -> Tensor:
        self._check_grid(t)
        return self.blocks[block](t)

    def upsample(self, t: Tensor) -> Tensor:
        self._check_grid(t)
        for conv, norm in zip(self.up, self.up_norms):
            t = T.relu(norm(conv(t)))
        return self.head(t)

    def forward(self, x: Tensor) -> Tensor:
        t = self.downsample(x)
        for block in self.blocks:
            t = block(t)
        return self.upsample(t)

    generate = forward

    def translate(self, slices: np.ndarray, batch_size: int = 4) -> np.ndarray:
        """Inference on a stack of (D, S, S) slices with frozen normalization statistics."""
        was_training = self.training
        self.eval()
        out = np.empty(slices.shape, dtype=np.float32)
        dtype = self.stem.weight.dtype
        with T.no_grad():
            for i in range(0, len(slices), batch_size):
                chunk = np.asarray(slices[i : i + batch_size], dtype=dtype)[:, None]
                out[i : i + batch_size] = self(Tensor(chunk)).data[:, 0]
        self.train(was_training)
        return out
