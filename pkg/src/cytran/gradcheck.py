"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float
    # (input index, flat element index) pairs whose one-sided differences disagree,
    # i.e. the function has a kink there; they are excluded from max_rel_error
    flagged: list[tuple[int, int]] = field(default_factory=list)
    worst: tuple[int, int] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel error {self.max_rel_error:.3e} over {self.checked} "
            f"elements (tol {self.tolerance:.0e}, {len(self.flagged)} kinks flagged)"
        )


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    samples: int | None = None,
    seed: int = 0,
    kink_tolerance: float = 1e-3,
    floor: float = 1e-6,
    relative_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f()`` against central differences.

    ``f`` is re-evaluated after perturbing ``inputs[i].data`` in place, so it
    must read the inputs by reference. With ``samples`` set, only that many
    randomly chosen elements per input are probed. Elements whose forward and
    backward one-sided slopes disagree by more than ``kink_tolerance``
    (relative) are reported as flagged rather than failed.

    The error denominator is max(|autodiff|, |numeric|, floor') with
    floor' = max(floor, relative_floor * largest |autodiff| entry), so
    gradients that are analytically zero are judged against the roundoff
    scale of the function rather than against themselves.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    loss = f()
    loss.backward()
    base = float(loss.data)
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    scale = max((float(np.abs(g).max()) for g in grads if g.size), default=0.0)
    floor = max(floor, relative_floor * scale)
    rng = np.random.default_rng(seed)
    worst_err, worst, flagged, checked = 0.0, None, [], 0
    for i, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            up = float(f().data)
            flat[j] = orig - step
            down = float(f().data)
            flat[j] = orig
            fwd, bwd = (up - base) / step, (base - down) / step
            if relative_error(np.array(fwd), np.array(bwd), max(floor, 1e-3)) > kink_tolerance:
                flagged.append((i, int(j)))
                continue
            numeric = (up - down) / (2 * step)
            err = float(relative_error(np.array(grads[i].reshape(-1)[j]), np.array(numeric), floor))
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (i, int(j))
    return GradCheckReport(worst_err, checked, tolerance, flagged, worst)
