"""Volumes: HU preprocessing, the CYTV container, synthetic triphasic phantoms, splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

PHASES = ("native", "venous", "arterial")
HU_SCALE = 1000.0

CYTV_MAGIC = b"CYTV"
CYTV_VERSION = 1
_CYTV_HEADER = struct.Struct("<4sIIIIBff")


class FormatError(ValueError):
    """A container file is malformed; ``offset`` is the byte position at fault."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Volume:
    voxels: np.ndarray  # (depth, height, width)
    intercept: float = 0.0
    slice_thickness_mm: float = 1.0
    phase: str = "native"

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ValueError(f"volume must be 3-D (depth, height, width), got {self.voxels.shape}")
        if self.voxels.shape[1] != self.voxels.shape[2]:
            raise ValueError(f"slices must be square, got {self.voxels.shape[1:]}")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if not np.isfinite(self.voxels).all():
            raise ValueError("volume contains non-finite voxels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def size(self) -> int:
        return self.voxels.shape[1]


def preprocess(raw: np.ndarray, intercept: float, phase: str = "native", slice_thickness_mm: float = 1.0) -> Volume:
    """Raw stored values -> (raw - intercept) / 1000.

    The rescale slope is taken to be 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    return Volume((raw - intercept) / HU_SCALE, float(intercept), slice_thickness_mm, phase)


def restore_raw(volume: Volume, integer: bool = True) -> np.ndarray:
    """Invert ``preprocess``. Stored CT values are integers, and rounding makes
    the float64 round trip exact; ``integer=False`` returns the bare affine inverse."""
    raw = np.asarray(volume.voxels, dtype=np.float64) * HU_SCALE + volume.intercept
    return np.rint(raw) if integer else raw


def save_volume(volume: Volume, path: str | Path) -> None:
    d, h, w = volume.shape
    header = _CYTV_HEADER.pack(
        CYTV_MAGIC, CYTV_VERSION, d, h, w, PHASES.index(volume.phase),
        volume.intercept, volume.slice_thickness_mm,
    )
    payload = np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def load_volume(path: str | Path) -> Volume:
    buf = Path(path).read_bytes()
    if len(buf) < 4:
        raise FormatError("file too short for a CYTV magic number", len(buf))
    if buf[:4] != CYTV_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {CYTV_MAGIC!r}", 0)
    if len(buf) < _CYTV_HEADER.size:
        raise FormatError("truncated CYTV header", len(buf))
    _, version, d, h, w, phase, intercept, thickness = _CYTV_HEADER.unpack_from(buf)
    if version != CYTV_VERSION:
        raise FormatError(f"unsupported CYTV version {version} (expected {CYTV_VERSION})", 4)
    if phase >= len(PHASES):
        raise FormatError(f"invalid phase tag {phase}", 20)
    need = _CYTV_HEADER.size + 4 * d * h * w
    if len(buf) < need:
        raise FormatError(
            f"truncated voxel payload: header declares {d}x{h}x{w} voxels, file holds "
            f"{(len(buf) - _CYTV_HEADER.size) // 4}",
            len(buf),
        )
    if len(buf) > need:
        raise FormatError("trailing bytes after voxel payload", need)
    voxels = np.frombuffer(buf, dtype="<f4", count=d * h * w, offset=_CYTV_HEADER.size)
    return Volume(voxels.reshape(d, h, w).astype(np.float32), intercept, thickness, PHASES[phase])


# ------------------------------------------------------------------ phantoms

@dataclass(frozen=True)
class Structure:
    """An axis-aligned ellipsoid painted over earlier structures.

    ``center`` and ``axes`` are fractions of the volume extent (z, y, x);
    ``contrast`` maps a phase to the intensity added inside under that phase.
    """

    center: tuple[float, float, float]
    axes: tuple[float, float, float]
    intensity: float
    contrast: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PhantomSpec:
    image_size: int = 128
    depth: int = 8
    structures: tuple[Structure, ...] | None = None  # None -> randomized thorax-like layout
    noise_sigma: float = 0.0
    misalignment: float = 0.0  # peak in-plane displacement (voxels) of contrast phases
    intercept: float = -1024.0
    slice_thickness_mm: float = 2.0


def _thorax(rng: np.random.Generator) -> tuple[Structure, ...]:
    """Body, lungs, spine, heart and aorta with jittered geometry.

    Intensities are in preprocessed units (HU / 1000). Unenhanced blood sits
    slightly above the surrounding soft tissue; the cardiac chambers and the
    aorta take up contrast, the venous phase mostly in the heart, the
    arterial phase mostly in the aorta.
    """
    j = lambda s: rng.uniform(-s, s)
    body = Structure((0.5, 0.5, 0.5), (0.9, 0.42 + j(0.03), 0.46 + j(0.03)), 0.0)
    lungs = [
        Structure((0.5, 0.47 + j(0.02), cx + j(0.02)), (0.8, 0.28 + j(0.03), 0.15 + j(0.02)), -0.82)
        for cx in (0.3, 0.7)
    ]
    spine = Structure((0.5, 0.8 + j(0.02), 0.5 + j(0.01)), (0.9, 0.07, 0.06), 0.7)
    heart = Structure(
        (0.5, 0.55 + j(0.03), 0.55 + j(0.03)), (0.7, 0.17 + j(0.02), 0.14 + j(0.02)), 0.05,
        {"venous": 0.16 + j(0.02), "arterial": 0.1 + j(0.02)},
    )
    aorta = Structure(
        (0.5, 0.66 + j(0.02), 0.42 + j(0.02)), (0.95, 0.06 + j(0.01), 0.06 + j(0.01)), 0.05,
        {"venous": 0.12 + j(0.02), "arterial": 0.3 + j(0.03)},
    )
    return (body, *lungs, spine, heart, aorta)


def _paint(spec: PhantomSpec, structures: Sequence[Structure], phase: str) -> np.ndarray:
    d, s = spec.depth, spec.image_size
    z, y, x = np.meshgrid(
        (np.arange(d) + 0.5) / d, (np.arange(s) + 0.5) / s, (np.arange(s) + 0.5) / s, indexing="ij"
    )
    vol = np.full((d, s, s), -1.0)  # air
    for st in structures:
        inside = (
            ((z - st.center[0]) / st.axes[0]) ** 2
            + ((y - st.center[1]) / st.axes[1]) ** 2
            + ((x - st.center[2]) / st.axes[2]) ** 2
        ) <= 1
        vol[inside] = st.intensity + st.contrast.get(phase, 0.0)
    return vol


def _check_bounds(structures: Sequence[Structure]) -> None:
    for st in structures:
        for c, a in zip(st.center, st.axes):
            if not 0 <= c <= 1 or a <= 0 or c - a > 1 or c + a < 0:
                raise ValueError(f"structure {st} lies outside the volume")


def smooth_field(shape: tuple[int, int, int], amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Random smooth in-plane displacement (3, D, H, W) with peak magnitude ``amplitude``.

    Built from a few low-frequency sinusoids; the z component is zero.
    """
    d, h, w = shape
    field = np.zeros((3,) + shape)
    if amplitude == 0:
        return field
    y, x = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    zz = np.arange(d)[:, None, None] / max(d, 1)
    for comp in (1, 2):
        acc = np.zeros(shape)
        for _ in range(3):
            fy, fx = rng.uniform(0.3, 1.2, 2)
            phase = rng.uniform(0, 2 * np.pi, 2)
            acc += np.sin(2 * np.pi * (fy * y + phase[0]) + 0.5 * zz) * np.cos(2 * np.pi * fx * x + phase[1])
        field[comp] = acc
    peak = np.abs(field).max()
    return field * (amplitude / peak)


@dataclass
class PhantomTriple:
    native: Volume
    venous: Volume
    arterial: Volume
    # displacement applied to each misaligned contrast phase, (3, D, H, W);
    # sampling offsets, i.e. moved(v) = aligned(v + field(v))
    fields: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, phase: str) -> Volume:
        if phase not in PHASES:
            raise KeyError(phase)
        return getattr(self, phase)


def generate_phantom_triple(spec: PhantomSpec, seed: int) -> PhantomTriple:
    """Co-registered native/venous/arterial volumes that differ only by contrast
    inside designated structures, plus optional smooth misalignment of the
    contrast phases and i.i.d. Gaussian noise. Deterministic per seed."""
    from .registration import warp

    rng = np.random.default_rng(seed)
    structures = spec.structures if spec.structures is not None else _thorax(rng)
    _check_bounds(structures)
    vols, fields = {}, {}
    for phase in PHASES:
        vol = _paint(spec, structures, phase)
        if phase != "native" and spec.misalignment > 0:
            fields[phase] = smooth_field(vol.shape, spec.misalignment, rng)
            vol = warp(vol, fields[phase])
        if spec.noise_sigma > 0:
            vol = vol + rng.normal(0.0, spec.noise_sigma, vol.shape)
        vols[phase] = Volume(vol.astype(np.float32), spec.intercept, spec.slice_thickness_mm, phase)
    return PhantomTriple(**vols, fields=fields)


def split(items: Sequence, ratios: Sequence[float] = (0.7, 0.15, 0.15), seed: int = 0) -> tuple[list, list, list]:
    """Deterministic patient-level train/val/test split.

    ``items`` are whole patients (e.g. phantom triples), so all phases of a
    patient always land in the same partition.
    """
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(items)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    sizes = (n_train, n_val, n_test)
    if n_test < 0 or any(size == 0 and r > 0 for size, r in zip(sizes, ratios)):
        raise ValueError(f"ratios {tuple(ratios)} leave an empty partition for {n} items")
    order = np.random.default_rng(seed).permutation(n)
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple([items[i] for i in part] for part in parts)
