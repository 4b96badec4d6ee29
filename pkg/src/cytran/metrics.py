"""Image-similarity metrics and slice-wise evaluation of translated volumes."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import correlate2d

from .data import Volume

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(
    a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
    k1: float = SSIM_K1, k2: float = SSIM_K2, dynamic_range: float = 1.0,
) -> np.ndarray:
    """Local SSIM at every position where the window fits entirely inside the image."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim works on 2-D images, got shape {a.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)
    blur = lambda img: correlate2d(img, w, mode="valid")
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a**2
    var_b = blur(b * b) - mu_b**2
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = (k1 * dynamic_range) ** 2, (k2 * dynamic_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2, dynamic_range: float = 1.0) -> float:
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        # the local ratio is exactly 1 analytically; skip the roundoff of the
        # moment estimates so that ssim(a, a) == 1.0 exactly
        if min(a.shape[-2:]) < window:
            raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
        return 1.0
    return float(np.mean(ssim_map(a, b, window, sigma, k1, k2, dynamic_range)))


@dataclass
class EvaluationReport:
    per_slice: list[tuple[int, float, float, float]] = field(default_factory=list)

    @property
    def mae(self) -> float:
        return float(np.mean([r[1] for r in self.per_slice]))

    @property
    def rmse(self) -> float:
        return float(np.mean([r[2] for r in self.per_slice]))

    @property
    def ssim(self) -> float:
        return float(np.mean([r[3] for r in self.per_slice]))

    def summary(self) -> dict[str, float]:
        return {"mae": self.mae, "rmse": self.rmse, "ssim": self.ssim}

    def lines(self) -> list[str]:
        out = ["slice_index, mae, rmse, ssim"]
        out += [f"{i}, {m!r}, {r!r}, {s!r}" for i, m, r, s in self.per_slice]
        out.append(f"mean, {self.mae!r}, {self.rmse!r}, {self.ssim!r}")
        return out

    def write(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n", encoding="utf-8")


def evaluate_translation(
    model: Callable[[np.ndarray], np.ndarray] | None,
    source: Volume | np.ndarray,
    target: Volume | np.ndarray,
    dynamic_range: float = 1.0,
) -> EvaluationReport:
    """Translate every source slice (``model=None`` is the no-transfer baseline)
    and compare it with the target slice at the same index."""
    src = source.voxels if isinstance(source, Volume) else np.asarray(source)
    tgt = target.voxels if isinstance(target, Volume) else np.asarray(target)
    if src.ndim != 3 or tgt.ndim != 3:
        raise ValueError("source and target must be (D, H, W) volumes")
    if len(src) != len(tgt):
        raise ValueError(f"slice count mismatch: {len(src)} vs {len(tgt)}")
    out = src if model is None else np.asarray(model(src))
    if out.shape != tgt.shape:
        raise ValueError(f"translated volume {out.shape} does not match target {tgt.shape}")
    report = EvaluationReport()
    for i, (p, q) in enumerate(zip(out, tgt)):
        report.per_slice.append((i, mae(p, q), rmse(p, q), ssim(p, q, dynamic_range=dynamic_range)))
    return report


def mean_report(reports: list[EvaluationReport]) -> dict[str, float]:
    """Average of per-volume summaries."""
    keys = ("mae", "rmse", "ssim")
    return {k: float(np.mean([r.summary()[k] for r in reports])) for k in keys}


__all__ = [
    "mae", "rmse", "ssim", "ssim_map", "gaussian_window",
    "EvaluationReport", "evaluate_translation", "mean_report",
]
