"""The depth-estimation network: backbone, two multi-scale branches, pose head, depth head.

Shapes: images (N, 3, S, S); heatmaps are kept flattened as (N, J, H*W) with
row-major cell order (v * W + u); pooled joint features are (N, J, C).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import geometry
from .autodiff import ShapeError, Tensor
from .autodiff import functional as F
from .autodiff.nn import BatchNorm, Conv2d, ConvBNReLU, Linear, Module
from .geometry import BinConfig, CameraIntrinsics
from .skeleton import normalize_adjacency

VARIANTS = ("full", "direct-regression", "shared-branch", "no-gnn", "no-hm-pooling")


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 256
    heatmap_size: int = 64
    num_joints: int = 16
    feature_channels: int = 16
    branch_channels: int = 8
    num_gnn_layers: int = 2
    bin_config: BinConfig = field(default_factory=BinConfig)
    variant: str = "full"
    pyramid_strides: tuple[int, ...] = (32, 16, 8, 4)
    renormalize_mask: bool = True
    detach_attention: bool = True

    def __post_init__(self):
        if self.input_size % self.heatmap_size:
            raise ValueError(f"heatmap_size {self.heatmap_size} must divide input_size {self.input_size}")
        if self.num_gnn_layers < 1:
            raise ValueError("num_gnn_layers must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        s = tuple(self.pyramid_strides)
        object.__setattr__(self, "pyramid_strides", s)
        if len(s) != 4 or any(a != 2 * b for a, b in zip(s, s[1:])) or s[-1] < 2:
            raise ValueError(f"pyramid_strides must halve level to level from coarse to fine, got {s}")
        if self.input_size % s[0]:
            raise ValueError(f"input_size {self.input_size} not divisible by coarsest stride {s[0]}")
        if any(st % self.heatmap_stride for st in s):
            raise ValueError("every pyramid stride must be a multiple of the heatmap stride")
        if isinstance(self.bin_config, dict):
            object.__setattr__(self, "bin_config", BinConfig(**self.bin_config))

    @property
    def heatmap_stride(self) -> int:
        return self.input_size // self.heatmap_size

    @property
    def depth_channels(self) -> int:
        return 4 * self.branch_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pyramid_strides"] = list(self.pyramid_strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "bin_config" in d and isinstance(d["bin_config"], dict):
            d["bin_config"] = BinConfig(**d["bin_config"])
        if "pyramid_strides" in d:
            d["pyramid_strides"] = tuple(d["pyramid_strides"])
        return cls(**d)

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


# ----------------------------------------------------------------------------
# heatmap operations (functional, usable outside the network)


def _flat_heatmaps(hm) -> tuple[Tensor, tuple[int, int] | None]:
    hm = hm if isinstance(hm, Tensor) else Tensor(hm)
    if hm.ndim == 3:  # (J, H, W)
        return F.reshape(hm, (1, hm.shape[0], -1)), hm.shape[1:]
    if hm.ndim == 4:  # (N, J, H, W)
        return F.reshape(hm, (hm.shape[0], hm.shape[1], -1)), hm.shape[2:]
    raise ShapeError(f"heatmaps must be (J,H,W) or (N,J,H,W), got {hm.shape}")


def bbox_mask(bbox, height: int, width: int) -> np.ndarray:
    """0/1 mask of heatmap cells whose centres lie inside ``bbox = (x0, y0, x1, y1)``."""
    x0, y0, x1, y1 = bbox
    u = np.arange(width)
    v = np.arange(height)
    m = ((v[:, None] >= y0) & (v[:, None] <= y1)) & ((u[None, :] >= x0) & (u[None, :] <= x1))
    if not m.any():
        raise ValueError(f"bounding box {tuple(bbox)} does not intersect the {width}x{height} heatmap grid")
    return m.astype(np.float64)


def mask_flat_heatmaps(hm: Tensor, masks: np.ndarray, renormalize: bool = True) -> Tensor:
    """Zero cells outside ``masks`` (N, H*W) and rescale each joint's mass back to one."""
    masked = F.mul(hm, Tensor(masks[:, None, :]))
    if not renormalize:
        return masked
    return F.div(masked, F.sum(masked, -1, keepdims=True))


def mask_heatmaps(hm, bbox, renormalize: bool = True) -> Tensor:
    """Restrict a (J,H,W) or (N,J,H,W) heatmap stack to a heatmap-coordinate bbox."""
    flat, (h, w) = _flat_heatmaps(hm)
    mask = bbox_mask(bbox, h, w).reshape(1, -1)
    out = mask_flat_heatmaps(flat, np.repeat(mask, flat.shape[0], axis=0), renormalize)
    shape = (hm.shape[0], h, w) if hm.ndim == 3 else (flat.shape[0], flat.shape[1], h, w)
    return F.reshape(out, shape)


def grid_coords(height: int, width: int) -> np.ndarray:
    """(H*W, 2) array of (u, v) for each flattened cell."""
    v, u = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([u.ravel(), v.ravel()], axis=1).astype(np.float64)


def soft_argmax_flat(hm: Tensor, height: int, width: int) -> Tensor:
    return F.matmul(hm, Tensor(grid_coords(height, width)))


def soft_argmax_2d(hm) -> Tensor:
    """Expected (u, v) per joint: (J, 2) for a (J,H,W) stack, (N, J, 2) for a batch."""
    flat, (h, w) = _flat_heatmaps(hm)
    out = soft_argmax_flat(flat, h, w)
    return F.reshape(out, out.shape[1:]) if hm.ndim == 3 else out


def attention_pool(hm, features) -> Tensor:
    """Heatmap-weighted sum of feature columns.

    ``hm`` is (J,H,W)/(N,J,H,W) or already flat (N,J,H*W); ``features`` is
    (C,H,W)/(N,C,H,W). Returns (J,C) or (N,J,C).
    """
    hm = hm if isinstance(hm, Tensor) else Tensor(hm)
    features = features if isinstance(features, Tensor) else Tensor(features)
    single = features.ndim == 3
    if single:
        features = F.reshape(features, (1,) + features.shape)
    n, c, h, w = features.shape
    if hm.ndim == 3 and hm.shape[-1] == h * w and not single:
        flat = hm
    else:
        flat, hw = _flat_heatmaps(hm)
        if tuple(hw) != (h, w):
            raise ShapeError(f"attention_pool: heatmaps {tuple(hw)} vs features {(h, w)}")
    if flat.shape[0] != n:
        raise ShapeError(f"attention_pool: batch {flat.shape[0]} vs {n}")
    cols = F.transpose(F.reshape(features, (n, c, h * w)), (0, 2, 1))
    pooled = F.matmul(flat, cols)
    return F.reshape(pooled, pooled.shape[1:]) if single else pooled


def expected_bin(bins: Tensor) -> Tensor:
    """Soft-argmax over the last (bin) axis: (N, N_B) -> (N,)."""
    nb = bins.shape[-1]
    b = F.matmul(bins, Tensor(np.arange(nb, dtype=np.float64).reshape(nb, 1)))
    return F.reshape(b, b.shape[:-1])


def bins_to_normalized_depth(b_hat: Tensor, cfg: BinConfig) -> Tensor:
    la, lb = np.log(cfg.alpha), np.log(cfg.beta)
    return F.exp(F.add(F.scale(b_hat, (lb - la) / (cfg.num_bins - 1)), la))


# ----------------------------------------------------------------------------
# network blocks


class Backbone(Module):
    """Strided conv encoder (C2..C5) with FPN-style lateral/top-down merging (P2..P5)."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        w = cfg.feature_channels
        stem_stride = cfg.pyramid_strides[-1] // 2
        self.stem = ConvBNReLU(rng, 3, w, 3, stride=stem_stride)
        self.down = [ConvBNReLU(rng, w, w, 3, stride=2) for _ in range(4)]
        self.refine = [ConvBNReLU(rng, w, w, 3, stride=1) for _ in range(4)]
        self.lateral = [Conv2d(rng, w, w, 1) for _ in range(4)]
        self.smooth = [Conv2d(rng, w, w, 3) for _ in range(4)]
        self.input_size = cfg.input_size

    def zero_init_output_layers(self) -> None:
        for conv in self.smooth:
            conv.weight.data[...] = 0.0
            conv.bias.data[...] = 0.0

    def __call__(self, image: Tensor) -> list[Tensor]:
        """Return the pyramid coarse-to-fine: [P5, P4, P3, P2]."""
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (self.input_size,) * 2:
            raise ShapeError(f"backbone expects (N, 3, {self.input_size}, {self.input_size}), got {image.shape}")
        x = self.stem(image)
        feats = []
        for down, refine in zip(self.down, self.refine):
            x = refine(down(x))
            feats.append(x)  # C2, C3, C4, C5
        lats = [lat(c) for lat, c in zip(self.lateral, feats)]
        p = lats[3]
        tops = [p]
        for k in (2, 1, 0):
            p = F.add(lats[k], F.upsample_nearest(p, 2))
            tops.append(p)
        # tops is P5..P2 before smoothing; smooth[k] belongs to level C(k+2)
        return [self.smooth[3 - i](t) for i, t in enumerate(tops)]


class MultiScaleBranch(Module):
    """Per level: conv, upsample to heatmap resolution, conv; then channel concat."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        w, c = cfg.feature_channels, cfg.branch_channels
        self.pre = [ConvBNReLU(rng, w, c, 3) for _ in range(4)]
        self.post = [ConvBNReLU(rng, c, c, 3) for _ in range(4)]
        self.factors = [s // cfg.heatmap_stride for s in cfg.pyramid_strides]
        self.heatmap_size = cfg.heatmap_size

    def __call__(self, pyramid: list[Tensor]) -> Tensor:
        blocks = []
        hs = self.heatmap_size
        for pre, post, f, level in zip(self.pre, self.post, self.factors, pyramid):
            x = pre(level)
            x = F.upsample_bilinear(x, (x.shape[2] * f, x.shape[3] * f))
            if x.shape[2:] != (hs, hs):
                raise ShapeError(f"upsampled level has size {x.shape[2:]}, expected {(hs, hs)}")
            blocks.append(post(x))
        return F.concat(blocks, axis=1)


class GNNLayer(Module):
    """out_i = act( a_ii * W_self x_i + sum_{j != i} a_ij * W_inter x_j )."""

    def __init__(self, rng, channels: int, adjacency: np.ndarray, activation: bool = True):
        super().__init__()
        self.w_self = Linear(rng, channels, channels, bias=False)
        self.w_inter = Linear(rng, channels, channels, bias=False)
        a = np.asarray(adjacency, dtype=np.float64)
        self.a_self = np.diag(np.diag(a))
        self.a_inter = a - self.a_self
        self.activation = activation
        if activation:
            self.bn = BatchNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        n, j, c = x.shape
        if j != self.a_self.shape[0]:
            raise ShapeError(f"GNN layer built for {self.a_self.shape[0]} nodes, got {j}")
        out = F.add(F.matmul(Tensor(self.a_self), self.w_self(x)),
                    F.matmul(Tensor(self.a_inter), self.w_inter(x)))
        if not self.activation:
            return out
        flat = self.bn(F.reshape(out, (n * j, c)))
        return F.reshape(F.relu(flat), (n, j, c))


class NodeFC(Module):
    """Per-node fully connected layer with BN + ReLU (GNN ablation replacement)."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.fc = Linear(rng, channels, channels, bias=False)
        self.bn = BatchNorm(channels)

    def __call__(self, x: Tensor) -> Tensor:
        shape = x.shape
        flat = F.reshape(self.fc(x), (-1, shape[-1]))
        return F.reshape(F.relu(self.bn(flat)), shape)


class DepthHead(Module):
    """Joint-feature graph layers, node mean-pool, then bin logits (or a scalar)."""

    def __init__(self, rng, cfg: ModelConfig, adjacency: np.ndarray):
        super().__init__()
        c = cfg.depth_channels
        self.variant = cfg.variant
        self.bin_config = cfg.bin_config
        if cfg.variant in ("no-gnn", "no-hm-pooling"):
            self.layers = [NodeFC(rng, c) for _ in range(cfg.num_gnn_layers)]
        else:
            self.layers = [GNNLayer(rng, c, adjacency) for _ in range(cfg.num_gnn_layers)]
        n_out = 1 if cfg.variant == "direct-regression" else cfg.bin_config.num_bins
        self.fc = Linear(rng, c, n_out)

    def __call__(self, x: Tensor) -> dict:
        """``x`` is (N, J, C) pooled joint features, or (N, C) for no-hm-pooling."""
        for layer in self.layers:
            x = layer(x)
        if x.ndim == 3:
            x = F.mean(x, 1)
        logits = self.fc(x)
        cfg = self.bin_config
        if self.variant == "direct-regression":
            scale = float(np.sqrt(cfg.alpha * cfg.beta))
            d_hat = F.scale(F.softplus(F.reshape(logits, (logits.shape[0],))), scale)
            return {"bins": None, "b_hat": None, "d_hat": d_hat}
        bins = F.softmax(logits, -1)
        b_hat = expected_bin(bins)
        return {"bins": bins, "b_hat": b_hat, "d_hat": bins_to_normalized_depth(b_hat, cfg)}


class HDNet(Module):
    def __init__(self, cfg: ModelConfig, adjacency: np.ndarray, seed: int = 0):
        super().__init__()
        if adjacency.shape != (cfg.num_joints, cfg.num_joints):
            raise ShapeError(f"adjacency {adjacency.shape} does not match {cfg.num_joints} joints")
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.adjacency = normalize_adjacency(adjacency)
        self.backbone = Backbone(rng, cfg)
        self.pose_branch = MultiScaleBranch(rng, cfg)
        if cfg.variant != "shared-branch":
            self.depth_branch = MultiScaleBranch(rng, cfg)
        self.pose_head = Conv2d(rng, cfg.depth_channels, cfg.num_joints, 1)
        self.depth_head = DepthHead(rng, cfg, self.adjacency)

    def features(self, images: Tensor) -> tuple[Tensor, Tensor]:
        pyramid = self.backbone(images)
        f_pose = self.pose_branch(pyramid)
        f_depth = f_pose if self.cfg.variant == "shared-branch" else self.depth_branch(pyramid)
        return f_pose, f_depth

    def __call__(self, images, masks: np.ndarray | None = None) -> dict:
        """Run the network on a batch.

        ``masks`` holds per-sample (H*W,) 0/1 bbox masks in heatmap cells;
        None keeps the full map. Returns heatmaps (N, J, H*W), heatmap-space
        joint coordinates (N, J, 2) and the depth-head outputs.
        """
        images = images if isinstance(images, Tensor) else Tensor(images)
        cfg = self.cfg
        hs = cfg.heatmap_size
        f_pose, f_depth = self.features(images)
        n = images.shape[0]
        logits = F.reshape(self.pose_head(f_pose), (n, cfg.num_joints, hs * hs))
        hm = F.softmax(logits, -1)
        if masks is not None:
            hm = mask_flat_heatmaps(hm, np.asarray(masks, dtype=np.float64), cfg.renormalize_mask)
        coords = soft_argmax_flat(hm, hs, hs)
        if cfg.variant == "no-hm-pooling":
            pooled = F.global_avg_pool(f_depth)
        else:
            # depth losses do not reach the pose branch through the attention masks
            att = hm.detach() if cfg.detach_attention else hm
            pooled = attention_pool(att, f_depth)
        out = self.depth_head(pooled)
        out.update(heatmaps=hm, coords=coords, f_pose=f_pose, f_depth=f_depth)
        return out


# ----------------------------------------------------------------------------
# inference-time composition


def root_from_outputs(root_uv_input: np.ndarray, d_hat: float, camera: CameraIntrinsics,
                      transform=None) -> tuple[np.ndarray, float]:
    """Back-project the root pixel (model-input coordinates) at the decoded depth.

    ``transform`` maps model-input pixels to original-image pixels (see
    :class:`hdnet.synth.CropTransform`); None means they coincide.
    """
    uv = np.asarray(root_uv_input, dtype=np.float64)
    if transform is not None:
        uv = transform.to_image(uv)
    depth = geometry.denormalize_depth(d_hat, camera)
    return geometry.back_project(uv[0], uv[1], depth, camera), depth


def predict(model: HDNet, images: np.ndarray, masks: np.ndarray | None,
            cameras: list[CameraIntrinsics], transforms: list | None = None,
            root_index: int = 0) -> list[dict]:
    """Inference over a batch: per-sample 2D pose, bins, absolute depth, root 3D point."""
    from .autodiff import no_grad

    cfg = model.cfg
    with no_grad():
        out = model(images, masks)
    coords = out["coords"].data * cfg.heatmap_stride
    d_hat = out["d_hat"].data
    results = []
    for i, cam in enumerate(cameras):
        tr = transforms[i] if transforms is not None else None
        root3d, depth = root_from_outputs(coords[i, root_index], float(d_hat[i]), cam, tr)
        results.append({
            "pose2d": coords[i],
            "bins": None if out["bins"] is None else out["bins"].data[i],
            "depth": depth,
            "root3d": root3d,
        })
    return results
