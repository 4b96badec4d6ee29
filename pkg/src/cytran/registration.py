"""Deformable registration: trilinear warping, field composition, a reference
displacement network, recursive cascades and translate-then-register.

A displacement field has shape (3, D, H, W) and holds (dz, dy, dx) in voxel
units. It is a sampling offset: ``warp(x, f)(v) = x(v + f(v))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_entries, save_entries
from .data import FormatError, Volume, smooth_field
from .nn import Conv2d, Module, TransposedConv2d
from .optim import Adam, AdamConfig
from .tensor import ShapeError, Tensor

FieldModel = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _as_array(volume) -> np.ndarray:
    return volume.voxels if isinstance(volume, Volume) else np.asarray(volume)


def _check_field(shape: tuple[int, ...], field: np.ndarray, what: str = "field") -> None:
    if field.shape != (3,) + tuple(shape):
        raise ShapeError(f"{what} of shape {field.shape} does not match grid {tuple(shape)}")
    if not np.isfinite(field).all():
        raise ValueError(f"{what} contains non-finite displacements")


def _axis_weights(pos: np.ndarray, n: int):
    pos = np.clip(pos, 0, n - 1)
    lo = np.minimum(np.floor(pos), max(n - 2, 0)).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, pos - lo


def sample(volume: np.ndarray, z: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``volume`` at fractional voxel positions, edge-clamped."""
    d, h, w = volume.shape
    z0, z1, fz = _axis_weights(z, d)
    y0, y1, fy = _axis_weights(y, h)
    x0, x1, fx = _axis_weights(x, w)
    v = volume
    c00 = v[z0, y0, x0] * (1 - fx) + v[z0, y0, x1] * fx
    c01 = v[z0, y1, x0] * (1 - fx) + v[z0, y1, x1] * fx
    c10 = v[z1, y0, x0] * (1 - fx) + v[z1, y0, x1] * fx
    c11 = v[z1, y1, x0] * (1 - fx) + v[z1, y1, x1] * fx
    return (c00 * (1 - fy) + c01 * fy) * (1 - fz) + (c10 * (1 - fy) + c11 * fy) * fz


def _grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def warp(volume, field: np.ndarray) -> np.ndarray:
    """Resample ``volume`` at v + field(v). A zero field returns the input unchanged."""
    vol = _as_array(volume)
    if vol.ndim != 3:
        raise ShapeError(f"warp expects a (D, H, W) volume, got {vol.shape}")
    _check_field(vol.shape, field)
    z, y, x = _grid(vol.shape)
    out = sample(vol.astype(np.float64), z + field[0], y + field[1], x + field[2])
    return out.astype(vol.dtype) if np.issubdtype(vol.dtype, np.floating) else out


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a then b): compose(a, b)(v) = b(v) + a(v + b(v)).

    ``warp(x, compose(a, b))`` approximates ``warp(warp(x, a), b)``.
    """
    if a.shape != b.shape or a.ndim != 4 or a.shape[0] != 3:
        raise ShapeError(f"cannot compose fields of shapes {a.shape} and {b.shape}")
    z, y, x = _grid(a.shape[1:])
    pz, py, px = z + b[0], y + b[1], x + b[2]
    return np.stack([b[c] + sample(a[c], pz, py, px) for c in range(3)])


def save_field(field: np.ndarray, path: str | Path, name: str = "field") -> None:
    save_entries({name: np.asarray(field, dtype=np.float64)}, path)


def load_field(path: str | Path, name: str = "field") -> np.ndarray:
    entries = load_entries(path)
    if name not in entries:
        raise FormatError(f"no entry named {name!r}")
    field = entries[name]
    if field.ndim != 4 or field.shape[0] != 3:
        raise FormatError(f"entry {name!r} has shape {field.shape}, not (3, D, H, W)")
    return field


# ------------------------------------------------------------ reference model

def _he(conv, rng: np.random.Generator, gain: float = 2.0) -> None:
    w = conv.weight.data
    fan_in = w[0].size if isinstance(conv, Conv2d) else w.shape[0] * w.shape[2] * w.shape[3] // 4
    conv.weight.data = (rng.standard_normal(w.shape) * np.sqrt(gain / fan_in)).astype(w.dtype)


class RegistrationNet(Module):
    """Three-level 2-D encoder-decoder with skip connections, applied slice by
    slice to (moving, fixed) and predicting in-plane (dy, dx); dz is zero."""

    def __init__(self, width: int = 16, seed: int = 0):
        rng = np.random.default_rng(seed)
        c = width
        self.enc = [
            Conv2d(2, c, 3, 1, 1, rng=rng),
            Conv2d(c, 2 * c, 3, 2, 1, rng=rng),
            Conv2d(2 * c, 2 * c, 3, 2, 1, rng=rng),
            Conv2d(2 * c, 2 * c, 3, 2, 1, rng=rng),
        ]
        self.up = [TransposedConv2d(2 * c, 2 * c, 4, 2, 1, rng=rng) for _ in range(3)]
        self.dec = [
            Conv2d(4 * c, 2 * c, 3, 1, 1, rng=rng),
            Conv2d(4 * c, 2 * c, 3, 1, 1, rng=rng),
            Conv2d(3 * c, c, 3, 1, 1, rng=rng),
        ]
        for conv in self.enc + self.up + self.dec:
            _he(conv, rng)
        self.flow = Conv2d(c, 2, 3, 1, 1, rng=rng)
        self.flow.weight.data *= 0.05
        self.width = width

    def forward(self, pair: Tensor) -> Tensor:
        """(N, 2, H, W) stacked (moving, fixed) -> (N, 2, H, W) displacement (dy, dx)."""
        if pair.ndim != 4 or pair.shape[1] != 2 or pair.shape[2] % 8 or pair.shape[3] % 8:
            raise ShapeError(f"registration net expects (N, 2, H, W) with H, W divisible by 8, got {pair.shape}")
        skips = []
        h = pair
        for conv in self.enc:
            h = T.leaky_relu(conv(h), 0.2)
            skips.append(h)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips[:-1])):
            h = T.leaky_relu(up(h), 0.2)
            h = T.leaky_relu(dec(T.concat([h, skip], axis=1)), 0.2)
        return self.flow(h)

    def predict_field(self, moving, fixed, batch_size: int = 8) -> np.ndarray:
        mov, fix = _as_array(moving), _as_array(fixed)
        if mov.shape != fix.shape or mov.ndim != 3:
            raise ShapeError(f"moving {mov.shape} and fixed {fix.shape} must be equal (D, H, W) grids")
        dtype = self.flow.weight.dtype
        field = np.zeros((3,) + mov.shape)
        with T.no_grad():
            for i in range(0, len(mov), batch_size):
                pair = np.stack([mov[i : i + batch_size], fix[i : i + batch_size]], axis=1).astype(dtype)
                out = self(Tensor(pair)).data
                field[1, i : i + batch_size] = out[:, 0]
                field[2, i : i + batch_size] = out[:, 1]
        return field

    def save(self, path: str | Path) -> None:
        save_entries(
            {"meta.width": np.array([self.width], np.uint64), **{k: np.asarray(v) for k, v in self.state_dict().items()}},
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> "RegistrationNet":
        state = load_entries(path)
        if "meta.width" not in state:
            raise FormatError("not a registration model checkpoint (missing meta.width)")
        with T.precision(state["flow.weight"].dtype):
            net = cls(int(state["meta.width"][0]))
        net.load_state_dict(state)
        return net


def smoothness(field: Tensor) -> Tensor:
    """Mean squared forward difference of a (N, 2, H, W) field along both axes."""
    dy = T.sub(T.index(field, (slice(None), slice(None), slice(1, None))), T.index(field, (slice(None), slice(None), slice(None, -1))))
    dx = T.sub(
        T.index(field, (slice(None), slice(None), slice(None), slice(1, None))),
        T.index(field, (slice(None), slice(None), slice(None), slice(None, -1))),
    )
    return T.mean(T.square(dy)) + T.mean(T.square(dx))


def registration_loss(net: RegistrationNet, moving: Tensor, fixed: Tensor, smooth_weight: float = 0.1):
    field = net(T.concat([moving, fixed], axis=1))
    similarity = T.mean(T.square(T.sub(T.grid_sample(moving, field), fixed)))
    return similarity + T.scale(smoothness(field), smooth_weight), similarity


@dataclass(frozen=True)
class RegistrationTrainConfig:
    steps: int = 300
    batch_size: int = 4
    learning_rate: float = 1e-3
    smooth_weight: float = 0.1
    misalignment: float = 3.0
    noise_sigma: float = 0.01
    seed: int = 0


def train_registration(
    net: RegistrationNet, volumes: Sequence[np.ndarray], config: RegistrationTrainConfig = RegistrationTrainConfig()
) -> list[float]:
    """Unsupervised training on synthetic pairs: each moving slice is a fixed
    slice resampled through a fresh random smooth field. Returns the loss trace."""
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.parameters(), AdamConfig(learning_rate=config.learning_rate))
    vols = [_as_array(v) for v in volumes]
    dtype = net.flow.weight.dtype
    trace = []
    net.train()
    for _ in range(config.steps):
        mov, fix = [], []
        for _ in range(config.batch_size):
            vol = vols[rng.integers(len(vols))]
            k = rng.integers(vol.shape[0])
            sl = vol[k : k + 1]
            f = smooth_field(sl.shape, config.misalignment * rng.uniform(0.3, 1.0), rng)
            moved = warp(sl, f)
            mov.append(moved[0] + rng.normal(0, config.noise_sigma, moved.shape[1:]))
            fix.append(sl[0] + rng.normal(0, config.noise_sigma, sl.shape[1:]))
        moving = Tensor(np.asarray(mov, dtype=dtype)[:, None])
        fixed = Tensor(np.asarray(fix, dtype=dtype)[:, None])
        opt.zero_grad()
        loss, _ = registration_loss(net, moving, fixed, config.smooth_weight)
        loss.backward()
        opt.step()
        trace.append(float(loss.data))
    net.eval()
    return trace


def _model_fn(model) -> FieldModel:
    return model.predict_field if hasattr(model, "predict_field") else model


@dataclass
class CascadeResult:
    warped: np.ndarray
    net_field: np.ndarray
    fields: list[np.ndarray]


def cascade_register(model, moving, fixed, n: int = 1, mode: str = "compose") -> CascadeResult:
    """Register ``moving`` to ``fixed`` by ``n`` recursive passes of ``model``.

    Each pass registers the current warped volume to ``fixed``; the per-pass
    fields are composed into ``net_field``. With ``mode="compose"`` (default)
    every pass resamples the original volume through the net field once. With
    ``mode="rewarp"`` the previous output is warped again, so interpolation
    blur accumulates.
    """
    if n < 1:
        raise ValueError(f"cascade needs n >= 1, got {n}")
    if mode not in ("compose", "rewarp"):
        raise ValueError(f"mode must be 'compose' or 'rewarp', got {mode!r}")
    fn = _model_fn(model)
    mov, fix = _as_array(moving), _as_array(fixed)
    if mov.shape != fix.shape:
        raise ShapeError(f"moving {mov.shape} and fixed {fix.shape} grids differ")
    current, net, fields = mov, None, []
    for _ in range(n):
        f = np.asarray(fn(current, fix), dtype=np.float64)
        _check_field(mov.shape, f, "model output")
        fields.append(f)
        net = f if net is None else compose(net, f)
        current = warp(mov, net) if mode == "compose" else warp(current, f)
    return CascadeResult(current, net, fields)


def translate_then_register(
    translator: Callable[[np.ndarray], np.ndarray] | None,
    model,
    x: Volume | np.ndarray,
    y: Volume | np.ndarray,
    n: int = 1,
) -> np.ndarray:
    """Translate contrast scan ``x`` slice-wise toward the phase of ``y``, derive
    the net field on the translation and apply it to the untranslated ``x``.

    ``translator`` maps a (D, S, S) stack to a stack of the same shape;
    ``None`` is the identity.
    """
    if isinstance(x, Volume) and isinstance(y, Volume) and x.phase == y.phase:
        raise ValueError(f"translate-then-register needs different phases, both are {x.phase!r}")
    xa = _as_array(x)
    x_hat = xa if translator is None else np.asarray(translator(xa))
    if x_hat.shape != xa.shape:
        raise ShapeError(f"translator changed the grid from {xa.shape} to {x_hat.shape}")
    net = cascade_register(model, x_hat, y, n).net_field
    return warp(xa, net)

