"""Cycle-consistent adversarial training of two generators and two patch discriminators.

G maps domain X to Y, F maps Y back to X. D_Y scores real y against G(x)
and D_X scores real x against F(y). Losses are least-squares GAN terms plus
an l1 cycle-consistency term weighted by lambda.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import decode, encode
from .data import PHASES, FormatError
from .discriminator import Discriminator
from .generator import Generator, GeneratorConfig
from .optim import Adam, AdamConfig
from .tensor import ShapeError, Tensor

LOSS_KEYS = ("l_gan_g", "l_gan_f", "l_cycle", "cycle_term", "total", "l_d_x", "l_d_y")


@dataclass(frozen=True)
class TrainConfig:
    lambda_cycle: float = 1.0
    learning_rate: float = 1e-4
    epochs: int = 70
    batch_size: int = 2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    image_size: int = 512
    history_buffer: int = 0  # 0 disables the pool of past fakes
    checkpoint_every: int = 1
    paper_literal_lsgan: bool = False
    # architecture
    base_width: int = 32
    transformer_channels: int = 128
    heads: int = 6
    head_dim: int = 64
    pointwise_channels: int = 512
    n_blocks: int = 9
    discriminator_width: int = 64

    def __post_init__(self):
        if self.lambda_cycle < 0:
            raise ValueError(f"lambda_cycle must be >= 0, got {self.lambda_cycle}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.history_buffer < 0 or self.epochs < 0 or self.checkpoint_every < 1:
            raise ValueError("history_buffer and epochs must be >= 0, checkpoint_every >= 1")

    @property
    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(
            base_width=self.base_width, transformer_channels=self.transformer_channels,
            heads=self.heads, head_dim=self.head_dim, pointwise_channels=self.pointwise_channels,
            n_blocks=self.n_blocks, image_size=self.image_size,
        )

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.eps)

    @classmethod
    def from_mapping(cls, values: dict[str, str | float | int | bool]) -> "TrainConfig":
        """Build from loosely typed values (e.g. parsed ``key = value`` text)."""
        kinds = {f.name: f.type for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown training option {key!r}")
            kind = kinds[key]
            if kind == "bool":
                if isinstance(raw, str):
                    if raw.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
                    raw = raw.lower() in ("true", "1", "yes", "on")
                parsed[key] = bool(raw)
            elif kind == "int":
                if isinstance(raw, str) and key == "history_buffer" and raw.lower() == "off":
                    raw = 0
                parsed[key] = int(raw)
            else:
                parsed[key] = float(raw)
        return cls(**parsed)


# ------------------------------------------------------------------ losses

def gan_loss_G(fake_scores: Tensor, literal: bool = False) -> Tensor:
    """Generator term: mean (1 - D(fake))^2, or mean D(fake)^2 under the literal orientation."""
    target = fake_scores if literal else T.add_scalar(T.neg(fake_scores), 1.0)
    return T.mean(T.square(target))


def gan_loss_D(real_scores: Tensor, fake_scores: Tensor, literal: bool = False) -> Tensor:
    """mean (D(real) - 1)^2 + mean D(fake)^2; labels swap under the literal orientation."""
    if literal:
        real_scores, fake_scores = fake_scores, real_scores
    return T.mean(T.square(T.add_scalar(real_scores, -1.0))) + T.mean(T.square(fake_scores))


def cycle_loss(G: Callable, F: Callable, x: Tensor, y: Tensor) -> Tensor:
    """mean |F(G(x)) - x| + mean |G(F(y)) - y|."""
    if x.shape != y.shape:
        raise ShapeError(f"cycle loss needs equally shaped batches, got {x.shape} and {y.shape}")
    return _cycle_terms(x, y, G(x), F(y), G, F)[0]


def _cycle_terms(x, y, fake_y, fake_x, G, F):
    rec_x, rec_y = F(fake_y), G(fake_x)
    return T.mean(T.absolute(T.sub(rec_x, x))) + T.mean(T.absolute(T.sub(rec_y, y))), rec_x, rec_y


# ------------------------------------------------------------------ state

class ImagePool:
    """Buffer of past generated images; half of each query is swapped for history."""

    def __init__(self, size: int):
        self.size = size
        self.images: list[np.ndarray] = []

    def query(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            if len(self.images) < self.size:
                self.images.append(img.copy())
                out.append(img)
            elif rng.random() < 0.5:
                k = int(rng.integers(self.size))
                out.append(self.images[k])
                self.images[k] = img.copy()
            else:
                out.append(img)
        return np.stack(out)


def _child_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


class CyTranState:
    def __init__(self, config: TrainConfig, phases: tuple[str, str] = ("native", "venous")):
        if len(phases) != 2 or phases[0] == phases[1] or not set(phases) <= set(PHASES):
            raise ValueError(f"phases must be two distinct names from {PHASES}, got {phases}")
        self.config = config
        self.phases = tuple(phases)  # (domain X, domain Y)
        seeds = _child_seeds(config.seed, 5)
        self.G = Generator(config.generator, seeds[0])
        self.F = Generator(config.generator, seeds[1])
        self.D_X = Discriminator(1, config.discriminator_width, seeds[2])
        self.D_Y = Discriminator(1, config.discriminator_width, seeds[3])
        self.opt_g = Adam(self.G.parameters() + self.F.parameters(), config.adam)
        self.opt_d = Adam(self.D_X.parameters() + self.D_Y.parameters(), config.adam)
        self.rng = np.random.Generator(np.random.PCG64(seeds[4]))
        self.pool_x = ImagePool(config.history_buffer)
        self.pool_y = ImagePool(config.history_buffer)
        self.epoch = 0  # completed epochs
        self.step = 0  # steps completed within the current epoch
        self.total_steps = 0
        self.perm: np.ndarray | None = None
        self.sums = np.zeros(len(LOSS_KEYS))

    @property
    def networks(self) -> dict[str, object]:
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}

    # -------------------------------------------------------- persistence
    def entries(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for key, value in asdict(self.config).items():
            dtype = np.float64 if isinstance(value, float) else np.uint64
            out[f"config.{key}"] = np.array([value], dtype=dtype)
        for prefix, net in self.networks.items():
            for name, arr in net.state_dict().items():
                out[f"{prefix}.{name}"] = np.asarray(arr)
        out.update(self.opt_g.state_dict("opt_g"))
        out.update(self.opt_d.state_dict("opt_d"))
        out["meta.phases"] = np.array([PHASES.index(p) for p in self.phases], np.uint64)
        out["rng.pcg64"] = _pack_rng(self.rng)
        out["progress"] = np.array([self.epoch, self.step, self.total_steps, self.perm is not None], np.uint64)
        out["epoch.perm"] = np.zeros(0, np.uint64) if self.perm is None else self.perm.astype(np.uint64)
        out["epoch.sums"] = self.sums.astype(np.float64)
        for name, pool in (("pool_x", self.pool_x), ("pool_y", self.pool_y)):
            size = self.config.image_size
            imgs = np.stack(pool.images) if pool.images else np.zeros((0, 1, size, size), np.float32)
            out[name] = imgs.astype(np.float32)
        return out

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "CyTranState":
        values = {}
        for f in fields(TrainConfig):
            key = f"config.{f.name}"
            if key not in entries:
                raise FormatError(f"checkpoint lacks entry {key!r}")
            v = entries[key][0]
            values[f.name] = float(v) if f.type == "float" else (bool(v) if f.type == "bool" else int(v))
        tags = entries.get("meta.phases")
        if tags is None or tags.shape != (2,) or tags.max() >= len(PHASES):
            raise FormatError("checkpoint lacks a valid 'meta.phases' entry")
        state = cls(TrainConfig(**values), tuple(PHASES[int(t)] for t in tags))
        try:
            for prefix, net in state.networks.items():
                sub = {k[len(prefix) + 1 :]: v for k, v in entries.items() if k.startswith(prefix + ".")}
                net.load_state_dict(sub)
            state.opt_g.load_state_dict(entries, "opt_g")
            state.opt_d.load_state_dict(entries, "opt_d")
            _unpack_rng(state.rng, entries["rng.pcg64"])
            epoch, step, total, has_perm = (int(v) for v in entries["progress"])
            state.epoch, state.step, state.total_steps = epoch, step, total
            state.perm = entries["epoch.perm"].astype(np.intp) if has_perm else None
            state.sums = entries["epoch.sums"].astype(np.float64)
            state.pool_x.images = list(entries["pool_x"])
            state.pool_y.images = list(entries["pool_y"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"inconsistent checkpoint: {exc}") from None
        return state


_MASK64 = (1 << 64) - 1


def _pack_rng(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array(
        [s >> 64, s & _MASK64, inc >> 64, inc & _MASK64, st["has_uint32"], st["uinteger"]], dtype=np.uint64
    )


def _unpack_rng(rng: np.random.Generator, packed: np.ndarray) -> None:
    v = [int(x) for x in packed]
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": (v[0] << 64) | v[1], "inc": (v[2] << 64) | v[3]},
        "has_uint32": v[4],
        "uinteger": v[5],
    }


def checkpoint_save(state: CyTranState, path: str | Path) -> None:
    Path(path).write_bytes(encode(state.entries()))


def checkpoint_load(path: str | Path) -> CyTranState:
    return CyTranState.from_entries(decode(Path(path).read_bytes()))


def load_generators(path: str | Path) -> tuple[Generator, Generator]:
    """The two translators (G: X->Y, F: Y->X) of a training checkpoint, in eval mode."""
    state = checkpoint_load(path)
    return state.G.eval(), state.F.eval()


# ------------------------------------------------------------------ steps

@dataclass
class _GeneratorPass:
    total: Tensor
    parts: dict[str, float]
    fake_y: Tensor
    fake_x: Tensor


def _generator_pass(state: CyTranState, x: Tensor, y: Tensor) -> _GeneratorPass:
    cfg = state.config
    literal = cfg.paper_literal_lsgan
    fake_y, fake_x = state.G(x), state.F(y)
    l_gan_g = gan_loss_G(state.D_Y(fake_y), literal)
    l_gan_f = gan_loss_G(state.D_X(fake_x), literal)
    l_cycle = _cycle_terms(x, y, fake_y, fake_x, state.G, state.F)[0]
    cycle_term = T.scale(l_cycle, cfg.lambda_cycle)
    total = l_gan_g + l_gan_f + cycle_term
    parts = {
        "l_gan_g": float(l_gan_g.data), "l_gan_f": float(l_gan_f.data),
        "l_cycle": float(l_cycle.data), "cycle_term": float(cycle_term.data),
        "total": float(total.data),
    }
    return _GeneratorPass(total, parts, fake_y, fake_x)


def _as_batch(a, dtype) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=dtype))
    return T.reshape(a, (a.shape[0], 1) + a.shape[1:]) if a.ndim == 3 else a


def total_loss(state: CyTranState, batch_x, batch_y) -> tuple[Tensor, dict[str, float]]:
    """L = L_GAN(G, D_Y) + L_GAN(F, D_X) + lambda * L_cycle, with its components."""
    dtype = state.G.stem.weight.dtype
    x, y = _as_batch(batch_x, dtype), _as_batch(batch_y, dtype)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("total_loss needs non-empty batches")
    gp = _generator_pass(state, x, y)
    return gp.total, gp.parts


def train_step(state: CyTranState, batch_x: np.ndarray, batch_y: np.ndarray) -> dict[str, float]:
    """One generator update on the total loss, then one discriminator update."""
    dtype = state.G.stem.weight.dtype
    x, y = _as_batch(batch_x, dtype), _as_batch(batch_y, dtype)
    literal = state.config.paper_literal_lsgan

    for d in (state.D_X, state.D_Y):
        d.requires_grad_(False)
    state.opt_g.zero_grad()
    gp = _generator_pass(state, x, y)
    gp.total.backward()  # raises NumericError on a non-finite loss
    state.opt_g.step()
    for d in (state.D_X, state.D_Y):
        d.requires_grad_(True)

    fake_y = state.pool_y.query(gp.fake_y.data, state.rng)
    fake_x = state.pool_x.query(gp.fake_x.data, state.rng)
    state.opt_d.zero_grad()
    l_d_y = gan_loss_D(state.D_Y(y), state.D_Y(Tensor(fake_y)), literal)
    l_d_x = gan_loss_D(state.D_X(x), state.D_X(Tensor(fake_x)), literal)
    (l_d_x + l_d_y).backward()
    state.opt_d.step()
    return {**gp.parts, "l_d_x": float(l_d_x.data), "l_d_y": float(l_d_y.data)}


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def train_epoch(
    state: CyTranState,
    dataset_x: np.ndarray,
    dataset_y: np.ndarray,
    stop_after: int | None = None,
    on_step: Callable[[CyTranState, dict[str, float]], None] | None = None,
) -> dict[str, float] | None:
    """Run (or resume) one epoch over the X pool.

    Every step takes the next ``batch_size`` entries of a seeded permutation
    of X and pairs each with a uniformly drawn y. Returns the epoch means of
    all loss components, or ``None`` if ``stop_after`` steps were taken
    before the epoch ended (the state can then be checkpointed and resumed).
    """
    n_x, n_y = len(dataset_x), len(dataset_y)
    if n_x == 0 or n_y == 0:
        raise ValueError("both unpaired pools must be non-empty")
    b = state.config.batch_size
    total = steps_per_epoch(n_x, b)
    if state.perm is None:
        state.perm = state.rng.permutation(n_x)
        state.step = 0
        state.sums = np.zeros(len(LOSS_KEYS))
    elif len(state.perm) != n_x:
        raise ValueError(f"resumed epoch was started on {len(state.perm)} samples, got {n_x}")
    taken = 0
    while state.step < total:
        if stop_after is not None and taken >= stop_after:
            return None
        idx = state.perm[state.step * b : (state.step + 1) * b]
        yidx = state.rng.integers(n_y, size=len(idx))
        losses = train_step(state, dataset_x[idx], dataset_y[yidx])
        state.sums += [losses[k] for k in LOSS_KEYS]
        state.step += 1
        state.total_steps += 1
        taken += 1
        if on_step is not None:
            on_step(state, losses)
    means = dict(zip(LOSS_KEYS, (state.sums / total).tolist()))
    state.epoch += 1
    state.perm, state.step = None, 0
    state.sums = np.zeros(len(LOSS_KEYS))
    return means


def log_line(state: CyTranState, losses: dict[str, float]) -> str:
    """``epoch, step, l_gan_g, l_gan_f, l_cycle, total`` for the step just taken."""
    vals = ", ".join(repr(losses[k]) for k in ("l_gan_g", "l_gan_f", "l_cycle", "total"))
    return f"{state.epoch}, {state.total_steps}, {vals}"


def fit(
    state: CyTranState,
    dataset_x: np.ndarray,
    dataset_y: np.ndarray,
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
) -> list[dict[str, float]]:
    """Train until ``config.epochs`` epochs are complete, checkpointing every
    ``checkpoint_every`` epochs and after the last one."""
    history = []
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        if log is not None and log.tell() == 0:
            log.write("epoch, step, l_gan_g, l_gan_f, l_cycle, total\n")
        hook = (lambda s, l: log.write(log_line(s, l) + "\n")) if log else None
        while state.epoch < state.config.epochs:
            history.append(train_epoch(state, dataset_x, dataset_y, on_step=hook))
            if checkpoint_path and (
                state.epoch % state.config.checkpoint_every == 0 or state.epoch == state.config.epochs
            ):
                checkpoint_save(state, checkpoint_path)
    finally:
        if log is not None:
            log.close()
    return history
