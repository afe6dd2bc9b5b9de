"""Finite-difference gradient suite over every primitive and the full training objective.

Each primitive check wraps the op's output in a fixed random projection so the
scalar being differentiated exercises every output element. Multi-input ops
are checked once per differentiable input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, check_parameters, current_tape, gradient_check
from .autodiff import functional as F
from .geometry import BinConfig, encode_bins
from .losses import LossWeights
from .model import ModelConfig, bbox_mask
from .skeleton import Skeleton, default_skeleton
from .synth import render_gt_heatmaps

STEP = 1e-6
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    coords: int


def _proj(out: Tensor, r: np.ndarray) -> Tensor:
    return F.sum_all(F.mul(out, Tensor(r)))


def _unary(fn, shape, rng, positive=False, away_from_zero=False):
    x = rng.normal(size=shape)
    if positive:
        x = np.abs(x) + 0.5
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + 0.1)
    probe = fn(Tensor(x))
    r = rng.normal(size=probe.shape)
    return (lambda t: _proj(fn(t), r)), x


def _binary(fn, shape_a, shape_b, rng, which, positive_b=False):
    a = rng.normal(size=shape_a)
    b = rng.normal(size=shape_b)
    if positive_b:
        b = np.abs(b) + 0.5
    r = rng.normal(size=fn(Tensor(a), Tensor(b)).shape)
    if which == 0:
        return (lambda t: _proj(fn(t, Tensor(b)), r)), a
    return (lambda t: _proj(fn(Tensor(a), t), r)), b


def _batch_norm(rng, which):
    x = rng.normal(size=(4, 3, 2, 2))
    g = rng.normal(size=3)
    bt = rng.normal(size=3)
    r = rng.normal(size=x.shape)
    args = [x, g, bt]

    def fn(t):
        vals = [Tensor(v) for v in args]
        vals[which] = t
        return _proj(F.batch_norm(vals[0], vals[1], vals[2], np.zeros(3), np.ones(3), True), r)

    return fn, args[which]


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable, np.ndarray]]:
    """(name, builder, point) triples covering every differentiable primitive."""
    w_conv = rng.normal(size=(3, 2, 3, 3))
    x_img = rng.normal(size=(2, 2, 5, 5))
    cases = [
        ("add", *_binary(F.add, (3, 4), (4,), rng, 0)),
        ("add[broadcast]", *_binary(F.add, (3, 4), (4,), rng, 1)),
        ("sub", *_binary(F.sub, (3, 4), (3, 4), rng, 1)),
        ("mul", *_binary(F.mul, (3, 4), (3, 1), rng, 0)),
        ("mul[broadcast]", *_binary(F.mul, (3, 4), (3, 1), rng, 1)),
        ("div[num]", *_binary(F.div, (3, 4), (3, 4), rng, 0, positive_b=True)),
        ("div[den]", *_binary(F.div, (3, 4), (3, 4), rng, 1, positive_b=True)),
        ("scale", *_unary(lambda t: F.scale(t, -2.5), (3, 4), rng)),
        ("relu", *_unary(F.relu, (3, 4), rng, away_from_zero=True)),
        ("exp", *_unary(F.exp, (3, 4), rng)),
        ("log", *_unary(lambda t: F.log(t, 1e-12), (3, 4), rng, positive=True)),
        ("abs", *_unary(F.abs, (3, 4), rng, away_from_zero=True)),
        ("softplus", *_unary(F.softplus, (3, 4), rng)),
        ("sum_all", *_unary(lambda t: F.scale(F.sum_all(t), 1.0), (3, 4), rng)),
        ("mean_all", *_unary(lambda t: F.scale(F.mean_all(t), 1.0), (3, 4), rng)),
        ("sum[axis]", *_unary(lambda t: F.sum(t, 1, keepdims=True), (2, 3, 4), rng)),
        ("mean[axis]", *_unary(lambda t: F.mean(t, 0), (2, 3, 4), rng)),
        ("reshape", *_unary(lambda t: F.reshape(t, (4, 3)), (3, 4), rng)),
        ("transpose", *_unary(lambda t: F.transpose(t, (2, 0, 1)), (2, 3, 4), rng)),
        ("index", *_unary(lambda t: F.index(t, (slice(None), [0, 2, 2])), (3, 4), rng)),
        ("concat", *_binary(lambda a, b: F.concat([a, b], axis=1), (2, 3), (2, 2), rng, 1)),
        ("matmul[a]", *_binary(F.matmul, (2, 3, 4), (4, 5), rng, 0)),
        ("matmul[b]", *_binary(F.matmul, (2, 3, 4), (4, 5), rng, 1)),
        ("linear[w]", *_binary(lambda x, w: F.linear(x, w, Tensor(np.ones(5))), (3, 4), (5, 4), rng, 1)),
        ("softmax", *_unary(lambda t: F.softmax(t, -1), (3, 6), rng)),
        ("conv2d[x]", (lambda t, r=rng.normal(size=(2, 3, 5, 5)):
                       _proj(F.conv2d(t, Tensor(w_conv), None, 1, 1), r)), x_img),
        ("conv2d[w,stride2]", (lambda t, r=rng.normal(size=(2, 3, 3, 3)):
                               _proj(F.conv2d(Tensor(x_img), t, None, 2, 1), r)), w_conv),
        ("conv2d[bias]", (lambda t, r=rng.normal(size=(2, 3, 3, 3)):
                          _proj(F.conv2d(Tensor(x_img), Tensor(w_conv), t, 1, 0), r)), rng.normal(size=3)),
        ("conv1x1", (lambda t, r=rng.normal(size=(2, 4, 5, 5)):
                     _proj(F.conv1x1(Tensor(x_img), t), r)), rng.normal(size=(4, 2, 1, 1))),
        ("avg_pool2d", *_unary(lambda t: F.avg_pool2d(t, 2), (2, 2, 4, 4), rng)),
        ("global_avg_pool", *_unary(F.global_avg_pool, (2, 3, 4, 4), rng)),
        ("upsample_nearest", *_unary(lambda t: F.upsample_nearest(t, 2), (1, 2, 3, 3), rng)),
        ("upsample_bilinear", *_unary(lambda t: F.upsample_bilinear(t, (7, 6)), (1, 2, 3, 3), rng)),
        ("batch_norm[x]", *_batch_norm(rng, 0)),
        ("batch_norm[gamma]", *_batch_norm(rng, 1)),
        ("batch_norm[beta]", *_batch_norm(rng, 2)),
    ]
    return cases


def tiny_model_config(variant: str = "full", detach_attention: bool = False) -> ModelConfig:
    """Small network for finite differences.

    The attention stop-gradient is off by default: with it on, backward is
    intentionally not the derivative of the forward objective.
    """
    return ModelConfig(input_size=32, heatmap_size=8, num_joints=16, feature_channels=4,
                       branch_channels=2, num_gnn_layers=2,
                       bin_config=BinConfig(20.0, 160.0, 9), variant=variant,
                       detach_attention=detach_attention)


def composite_case(seed: int, variant: str = "full", skeleton: Skeleton | None = None):
    """A tiny HDNet with random inputs/targets and the full weighted objective.

    Returns ``(loss_fn, params)`` for :func:`check_parameters`.
    """
    from .training import PersonSet, batch_losses, make_model

    skeleton = skeleton or default_skeleton()
    cfg = tiny_model_config(variant)
    rng = np.random.default_rng(seed)
    model = make_model(cfg, skeleton, seed)
    n, j, hs, nb = 2, cfg.num_joints, cfg.heatmap_size, cfg.bin_config.num_bins
    pose = rng.uniform(1.0, hs - 2.0, size=(n, j, 2))
    maps = np.stack([render_gt_heatmaps(p, hs, 0.75)[0].reshape(j, -1) for p in pose])
    b = rng.uniform(0.5, nb - 1.5, size=n)
    batch = PersonSet(
        images=rng.uniform(size=(n, 3, cfg.input_size, cfg.input_size)),
        masks=np.stack([bbox_mask((1, 1, hs - 2, hs - 2), hs, hs).ravel()] * n),
        heatmaps=maps, pose_hm=pose, visible=np.ones((n, j)),
        bins=np.stack([encode_bins(bi, nb).weights for bi in b]), b=b,
        d_hat=cfg.bin_config.alpha * (cfg.bin_config.beta / cfg.bin_config.alpha) ** (b / (nb - 1)),
        image_id=np.arange(n), person=np.zeros(n, dtype=int), pose3d=np.zeros((n, j, 3)))
    weights = LossWeights()

    def loss_fn():
        return batch_losses(model, batch, weights)[0]

    return loss_fn, model.parameters()


def run_suite(seeds=(0,), tolerance: float = TOLERANCE, composite: bool = True,
              max_coords_per_param: int = 2) -> list[CheckResult]:
    """Run every primitive check (and the composite objective) for each seed.

    Results are aggregated per check name with the worst error over seeds.
    """
    worst: dict[str, list] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, builder, point in primitive_cases(rng):
            rep = gradient_check(builder, point, step=STEP, tolerance=tolerance)
            _merge(worst, name, rep.max_rel_error, len(rep.rel_errors))
        if composite:
            loss_fn, params = composite_case(seed)
            rep = check_parameters(loss_fn, params, step=STEP, tolerance=tolerance,
                                   max_coords_per_param=max_coords_per_param,
                                   rng=np.random.default_rng(seed))
            _merge(worst, "objective[full model]", rep.max_rel_error, len(rep.rel_errors))
        current_tape().clear()
    return [CheckResult(k, v[0], v[0] < tolerance, v[1]) for k, v in worst.items()]


def _merge(acc: dict, name: str, err: float, n: int) -> None:
    prev = acc.get(name, [0.0, 0])
    acc[name] = [max(prev[0], err), prev[1] + n]
