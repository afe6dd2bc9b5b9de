"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, current_tape, detect_anomaly, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    rel_errors: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} max_rel_error={self.max_rel_error:.3e} over {self.rel_errors.size} coords"


def gradient_check(builder: Callable[[Tensor], Tensor], point: np.ndarray | Tensor,
                   step: float = 1e-5, tolerance: float = 1e-4,
                   coords: Sequence[int] | None = None) -> GradCheckReport:
    """Compare backward() against central differences of ``builder`` at ``point``.

    ``builder`` maps a tensor to a scalar tensor and must be deterministic.
    The per-coordinate error is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    flat_idx = np.arange(base.size) if coords is None else np.asarray(coords)

    current_tape().clear()
    x = Tensor(base.copy(), requires_grad=True)
    with detect_anomaly():
        loss = builder(x)
    backward(loss)
    analytic = x.grad.reshape(-1)[flat_idx].copy()

    numeric = np.empty(len(flat_idx))
    with no_grad(), detect_anomaly():
        for k, i in enumerate(flat_idx):
            xp = base.copy().reshape(-1)
            xp[i] += step
            fp = builder(Tensor(xp.reshape(base.shape))).item()
            xp[i] -= 2 * step
            fm = builder(Tensor(xp.reshape(base.shape))).item()
            numeric[k] = (fp - fm) / (2 * step)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, worst < tolerance, rel, analytic, numeric)


def check_parameters(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                     step: float = 1e-5, tolerance: float = 1e-4,
                     max_coords_per_param: int | None = None,
                     rng: np.random.Generator | None = None) -> GradCheckReport:
    """Finite-difference check of a closure against a list of leaf parameters.

    Parameters are perturbed in place and restored. With ``max_coords_per_param``
    a random subset of coordinates of each parameter is probed.
    """
    rng = rng or np.random.default_rng(0)
    current_tape().clear()
    for p in params:
        p.zero_grad()
    with detect_anomaly():
        loss = loss_fn()
    backward(loss)

    analytic, numeric = [], []
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            idx = np.sort(rng.choice(flat.size, max_coords_per_param, replace=False))
        gflat = p.grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            with no_grad(), detect_anomaly():
                flat[i] = orig + step
                fp = loss_fn().item()
                flat[i] = orig - step
                fm = loss_fn().item()
            flat[i] = orig
            analytic.append(gflat[i])
            numeric.append((fp - fm) / (2 * step))
    a, n = np.array(analytic), np.array(numeric)
    rel = np.abs(a - n) / np.maximum(1.0, np.abs(n))
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(worst, worst < tolerance, rel, a, n)
