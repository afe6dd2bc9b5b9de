"""Pinhole camera helpers and the log-depth bin codec.

Depths are in millimetres, image coordinates in pixels with pixel centres at
integer positions. Normalized depth divides out the geometric-mean focal
length so the same bin layout serves every camera.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def focal(self) -> float:
        return math.sqrt(self.fx * self.fy)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True)
class BinConfig:
    alpha: float = 1.0
    beta: float = 8.0
    num_bins: int = 71

    def __post_init__(self):
        if not 0 < self.alpha < self.beta:
            raise ValueError(f"need 0 < alpha < beta, got alpha={self.alpha}, beta={self.beta}")
        if self.num_bins < 2:
            raise ValueError(f"num_bins must be >= 2, got {self.num_bins}")


@dataclass(frozen=True)
class BinDistribution:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size < 2:
            raise ValueError(f"bin weights must be a vector of length >= 2, got shape {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"bin weights must be nonnegative and sum to 1 (sum={w.sum():.12g})")
        object.__setattr__(self, "weights", w)

    @property
    def num_bins(self) -> int:
        return self.weights.size

    def expected_index(self) -> float:
        return float(self.weights @ np.arange(self.weights.size))


class ClampCounter:
    """Counts normalized depths clamped into [alpha, beta] during target encoding."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


clamp_events = ClampCounter()


def normalize_depth(d, camera: CameraIntrinsics):
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr <= 0):
        raise ValueError(f"depth must be positive, got {d}")
    out = d_arr / camera.focal
    return float(out) if out.ndim == 0 else out


def denormalize_depth(d_hat, camera: CameraIntrinsics):
    out = np.asarray(d_hat, dtype=np.float64) * camera.focal
    return float(out) if out.ndim == 0 else out


def bin_index(d_hat: float, cfg: BinConfig) -> float:
    """Continuous bin coordinate of a normalized depth, in [0, num_bins - 1].

    Values outside [alpha, beta] are clamped and counted in ``clamp_events``.
    """
    if d_hat <= 0:
        raise ValueError(f"normalized depth must be positive, got {d_hat}")
    if d_hat < cfg.alpha or d_hat > cfg.beta:
        clamp_events.count += 1
        log.warning("normalized depth %.4g outside [%g, %g]; clamped", d_hat, cfg.alpha, cfg.beta)
        d_hat = min(max(d_hat, cfg.alpha), cfg.beta)
    b = (math.log(d_hat) - math.log(cfg.alpha)) / (math.log(cfg.beta) - math.log(cfg.alpha))
    return min(max(b * (cfg.num_bins - 1), 0.0), cfg.num_bins - 1.0)


def bin_to_normalized_depth(b, cfg: BinConfig):
    """Inverse of :func:`bin_index` for real-valued (expected) bin coordinates."""
    la, lb = math.log(cfg.alpha), math.log(cfg.beta)
    return np.exp(np.asarray(b, dtype=np.float64) / (cfg.num_bins - 1) * (lb - la) + la)


def encode_bins(b: float, num_bins: int) -> BinDistribution:
    """Two-bin linear-interpolation target whose expected index equals ``b``."""
    if not 0 <= b <= num_bins - 1:
        raise ValueError(f"bin coordinate {b} outside [0, {num_bins - 1}]")
    i = min(int(math.floor(b)), num_bins - 2)
    # snap to a 1e-12 grid so decimal inputs (b=2.4) yield decimal weights (0.6, 0.4)
    frac = round(b - i, 12)
    w = np.zeros(num_bins)
    w[i] = 1.0 - frac
    w[i + 1] = frac
    return BinDistribution(w)


def decode_depth(dist, cfg: BinConfig, camera: CameraIntrinsics) -> float:
    """Absolute depth from the expected bin index of ``dist``."""
    if not isinstance(dist, BinDistribution):
        dist = BinDistribution(np.asarray(dist, dtype=np.float64))
    if dist.num_bins != cfg.num_bins:
        raise ValueError(f"distribution has {dist.num_bins} bins, config expects {cfg.num_bins}")
    return float(bin_to_normalized_depth(dist.expected_index(), cfg)) * camera.focal


def back_project(u, v, d, camera: CameraIntrinsics) -> np.ndarray:
    """Camera-space point(s) (X, Y, Z) for pixel(s) (u, v) at depth(s) d."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    x = (np.asarray(u, dtype=np.float64) - camera.cx) * d / camera.fx
    y = (np.asarray(v, dtype=np.float64) - camera.cy) * d / camera.fy
    return np.stack(np.broadcast_arrays(x, y, d), axis=-1)


def project(points, camera: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates (..., 2) of camera-space points (..., 3)."""
    p = np.asarray(points, dtype=np.float64)
    if np.any(p[..., 2] <= 0):
        raise ValueError("points must lie in front of the camera (Z > 0)")
    u = camera.fx * p[..., 0] / p[..., 2] + camera.cx
    v = camera.fy * p[..., 1] / p[..., 2] + camera.cy
    return np.stack([u, v], axis=-1)
