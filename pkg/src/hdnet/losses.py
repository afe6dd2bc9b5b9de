"""Training losses for the pose and depth branches and their weighted sum.

All terms accept batched tensors and average over the batch; unbatched inputs
are treated as a batch of one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor
from .autodiff import functional as F

CE_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_hm: float = 1000.0
    lambda_pose: float = 0.1
    lambda_bins: float = 1.0
    lambda_idx: float = 0.1

    def __post_init__(self):
        vals = (self.lambda_hm, self.lambda_pose, self.lambda_bins, self.lambda_idx)
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be nonnegative, got {vals}")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def heatmap_mse(pred, target) -> Tensor:
    """Mean squared difference over every joint and heatmap cell."""
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeError(f"heatmap_mse: {pred.shape} vs {target.shape}")
    diff = F.sub(pred, target)
    return F.mean_all(F.mul(diff, diff))


def pose_l1(pred, target, visible=None) -> Tensor:
    """(1/N_J) * sum_j |du_j| + |dv_j|, averaged over the batch.

    ``visible`` (same leading shape, no trailing 2) zeroes out truncated joints.
    """
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape or pred.shape[-1] != 2:
        raise ShapeError(f"pose_l1: {pred.shape} vs {target.shape}")
    err = F.abs(F.sub(pred, target))
    if visible is not None:
        err = F.mul(err, np.asarray(visible, dtype=np.float64)[..., None])
    n_poses = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    return F.scale(F.sum_all(err), 1.0 / (n_poses * pred.shape[-2]))


def bins_ce(pred, target) -> Tensor:
    """Cross-entropy -sum_i t_i log p_i with a 1e-12 guard inside the log."""
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeError(f"bins_ce: {pred.shape} vs {target.shape}")
    n = int(np.prod(pred.shape[:-1])) if pred.ndim > 1 else 1
    return F.scale(F.sum_all(F.mul(target, F.log(pred, CE_EPS))), -1.0 / n)


def idx_l1(pred_b, target_b) -> Tensor:
    """Mean absolute difference between expected and target bin coordinates."""
    pred_b, target_b = _t(pred_b), _t(target_b)
    if pred_b.shape != target_b.shape:
        raise ShapeError(f"idx_l1: {pred_b.shape} vs {target_b.shape}")
    return F.mean_all(F.abs(F.sub(pred_b, target_b)))


def total_loss(parts: dict, w: LossWeights) -> Tensor:
    """Weighted sum of the ``hm``, ``pose``, ``bins`` and ``idx`` terms.

    Terms with zero weight are dropped from the graph entirely.
    """
    terms = [(w.lambda_hm, parts.get("hm")), (w.lambda_pose, parts.get("pose")),
             (w.lambda_bins, parts.get("bins")), (w.lambda_idx, parts.get("idx"))]
    out = None
    for lam, part in terms:
        if lam == 0 or part is None:
            continue
        term = F.scale(_t(part), lam)
        out = term if out is None else F.add(out, term)
    return out if out is not None else Tensor(0.0)
