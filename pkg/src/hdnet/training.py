"""Person-patch datasets, the training loop, checkpoints and evaluation helpers.

Every synthetic person becomes one training sample: a fixed-size patch cut
at original scale around its bounding box, the box as a heatmap-cell mask,
Gaussian target heatmaps, heatmap-space joint targets and depth-bin targets.
Minibatch ``k`` is drawn with ``default_rng([seed, k])`` so a resumed run
sees exactly the batches the unbroken run would have.
"""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import geometry
from .autodiff import Tensor, backward, no_grad
from .autodiff import functional as F
from .autodiff.optim import Adam, step_decay_lr
from .config import ExperimentConfig
from .geometry import CameraIntrinsics
from .losses import LossWeights, bins_ce, heatmap_mse, idx_l1, pose_l1, total_loss
from .metrics import RootPrediction
from .model import HDNet, ModelConfig, bbox_mask
from .skeleton import Skeleton, build_adjacency
from .synth import CropTransform, SceneSample, crop_and_resize, render_gt_heatmaps

CHECKPOINT_FORMAT = "hdnet-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# ----------------------------------------------------------------------------
# person-level samples


@dataclass
class PersonSet:
    images: np.ndarray      # (M, 3, S, S) float32
    masks: np.ndarray       # (M, H*W) 0/1
    heatmaps: np.ndarray    # (M, J, H*W) float32
    pose_hm: np.ndarray     # (M, J, 2) heatmap coordinates
    visible: np.ndarray     # (M, J) float 0/1
    bins: np.ndarray        # (M, N_B) two-hot targets
    b: np.ndarray           # (M,) bin coordinates
    d_hat: np.ndarray       # (M,) normalized depths
    image_id: np.ndarray    # (M,) scene index within the split
    person: np.ndarray      # (M,) person index within the scene
    pose3d: np.ndarray      # (M, J, 3) camera space, mm
    cameras: list[CameraIntrinsics] = field(default_factory=list)
    transforms: list[CropTransform] = field(default_factory=list)
    sequences: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "PersonSet":
        idx = np.asarray(idx)
        arrays = {k: getattr(self, k)[idx] for k in
                  ("images", "masks", "heatmaps", "pose_hm", "visible", "bins", "b", "d_hat",
                   "image_id", "person", "pose3d")}
        return PersonSet(**arrays, cameras=[self.cameras[i] for i in idx],
                         transforms=[self.transforms[i] for i in idx],
                         sequences=[self.sequences[i] for i in idx])


def build_person_set(scenes: list[SceneSample], cfg: ModelConfig, sigma: float = 0.75) -> PersonSet:
    s, hs, stride = cfg.input_size, cfg.heatmap_size, cfg.heatmap_stride
    bcfg = cfg.bin_config
    cols: dict[str, list] = {k: [] for k in ("images", "masks", "heatmaps", "pose_hm", "visible", "bins",
                                             "b", "d_hat", "image_id", "person", "pose3d")}
    cams, trs, seqs = [], [], []
    for image_id, sc in enumerate(scenes):
        for k, p in enumerate(sc.persons):
            center = 0.5 * (p.bbox[:2] + p.bbox[2:])
            patch, tr = crop_and_resize(sc.image, center, s, s)
            pose_hm = tr.to_patch(p.pose2d) / stride
            box = np.concatenate([tr.to_patch(p.bbox[:2]), tr.to_patch(p.bbox[2:])]) / stride
            maps, vis = render_gt_heatmaps(pose_hm, hs, sigma)
            d_hat = geometry.normalize_depth(p.root_depth, sc.camera)
            b = geometry.bin_index(d_hat, bcfg)
            cols["images"].append(patch.astype(np.float32))
            cols["masks"].append(bbox_mask(box, hs, hs).ravel())
            cols["heatmaps"].append(maps.reshape(len(maps), -1).astype(np.float32))
            cols["pose_hm"].append(pose_hm)
            cols["visible"].append(vis.astype(np.float64))
            cols["bins"].append(geometry.encode_bins(b, bcfg.num_bins).weights)
            cols["b"].append(b)
            cols["d_hat"].append(d_hat)
            cols["image_id"].append(image_id)
            cols["person"].append(k)
            cols["pose3d"].append(p.pose3d)
            cams.append(sc.camera)
            trs.append(tr)
            seqs.append(sc.sequence)
    if not cams:
        j, nb = cfg.num_joints, bcfg.num_bins
        empty = {"images": (0, 3, s, s), "masks": (0, hs * hs), "heatmaps": (0, j, hs * hs),
                 "pose_hm": (0, j, 2), "visible": (0, j), "bins": (0, nb), "b": (0,), "d_hat": (0,),
                 "image_id": (0,), "person": (0,), "pose3d": (0, j, 3)}
        return PersonSet(**{k: np.zeros(v) for k, v in empty.items()})
    arrays = {k: np.asarray(v) for k, v in cols.items()}
    return PersonSet(**arrays, cameras=cams, transforms=trs, sequences=seqs)


# ----------------------------------------------------------------------------
# losses on a batch


def batch_losses(model: HDNet, batch: PersonSet, weights: LossWeights) -> tuple[Tensor, dict]:
    """Forward pass plus the weighted objective; returns (total, parts)."""
    cfg = model.cfg
    out = model(Tensor(batch.images.astype(np.float64)), batch.masks)
    vis = batch.visible[:, :, None]
    parts = {
        "hm": heatmap_mse(F.mul(out["heatmaps"], vis), batch.heatmaps.astype(np.float64) * vis),
        "pose": pose_l1(out["coords"], batch.pose_hm, batch.visible),
    }
    if cfg.variant == "direct-regression":
        bc = cfg.bin_config
        err = F.abs(F.sub(out["d_hat"], Tensor(batch.d_hat)))
        parts["bins"] = F.scale(F.mean_all(err), 1.0 / math.sqrt(bc.alpha * bc.beta))
    else:
        parts["bins"] = bins_ce(out["bins"], batch.bins)
        parts["idx"] = idx_l1(out["b_hat"], batch.b)
    return total_loss(parts, weights), parts


# ----------------------------------------------------------------------------
# checkpoints


def make_model(cfg: ModelConfig, skeleton: Skeleton, seed: int) -> HDNet:
    if skeleton.num_joints != cfg.num_joints:
        raise ValueError(f"skeleton has {skeleton.num_joints} joints, model expects {cfg.num_joints}")
    return HDNet(cfg, build_adjacency(skeleton), seed=seed)


@dataclass
class TrainState:
    step: int = 0
    best: dict = field(default_factory=lambda: {"step": -1, "val_median_rel": float("inf")})
    log: list = field(default_factory=list)


def save_checkpoint(path: str | Path, model: HDNet, skeleton: Skeleton, state: TrainState,
                    optimizer: Adam | None = None, experiment: ExperimentConfig | None = None) -> Path:
    """Write parameters, buffers, optimizer moments and metadata to one ``.npz``."""
    path = Path(path)
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        arrays.update({f"optim/{k}": v for k, v in optimizer.state_dict().items()})
    meta = {
        "format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(), "skeleton": skeleton.to_dict(),
        "step": state.step, "best": state.best, "log": state.log,
        "experiment": experiment.to_dict() if experiment is not None else None,
        "config_hash": experiment.hash() if experiment is not None else None,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)
    return path


@dataclass
class Checkpoint:
    model: HDNet
    skeleton: Skeleton
    state: TrainState
    optim_state: dict
    meta: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z:
            raise ValueError(f"{path}: not an HDNet checkpoint")
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        model_state = {k[6:]: z[k] for k in z.files if k.startswith("model/")}
        optim_state = {k[6:]: z[k] for k in z.files if k.startswith("optim/")}
    cfg = ModelConfig.from_dict(meta["model_config"])
    skeleton = Skeleton.from_dict(meta["skeleton"])
    model = make_model(cfg, skeleton, seed=0)
    model.load_state_dict(model_state)
    state = TrainState(meta["step"], meta["best"], meta["log"])
    return Checkpoint(model, skeleton, state, optim_state, meta)


# ----------------------------------------------------------------------------
# inference and evaluation


def infer(model: HDNet, data: PersonSet, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Eval-mode forward over a person set; returns coords, d_hat and confidence scores."""
    was_training = model.training
    model.eval()
    coords, d_hat, scores = [], [], []
    nb = model.cfg.bin_config.num_bins
    try:
        with no_grad():
            for i in range(0, len(data), batch_size):
                sl = slice(i, i + batch_size)
                out = model(Tensor(data.images[sl].astype(np.float64)), data.masks[sl])
                coords.append(out["coords"].data)
                d_hat.append(out["d_hat"].data)
                if out["bins"] is None:
                    scores.append(np.ones(len(out["d_hat"].data)))
                else:
                    p = out["bins"].data
                    ent = -(p * np.log(np.clip(p, 1e-12, None))).sum(axis=-1)
                    scores.append(1.0 - ent / np.log(nb))
    finally:
        model.train(was_training)
    if not coords:
        j = model.cfg.num_joints
        return {"coords": np.zeros((0, j, 2)), "d_hat": np.zeros(0), "score": np.zeros(0)}
    return {"coords": np.concatenate(coords), "d_hat": np.concatenate(d_hat), "score": np.concatenate(scores)}


def depth_errors(pred_d_hat: np.ndarray, data: PersonSet) -> np.ndarray:
    """Relative root-depth errors |d - d_gt| / d_gt (scale-free, so normalized depths suffice)."""
    return np.abs(pred_d_hat - data.d_hat) / data.d_hat


def predictions_from_outputs(outputs: dict, data: PersonSet, root_index: int,
                             stride: int) -> dict[int, list[RootPrediction]]:
    """Back-project each person's root and attach the ground-truth root-relative pose."""
    preds: dict[int, list[RootPrediction]] = {}
    for m in range(len(data)):
        uv = outputs["coords"][m, root_index] * stride
        root3d, _ = _root(uv, float(outputs["d_hat"][m]), data.cameras[m], data.transforms[m])
        gt = data.pose3d[m]
        pose3d = gt - gt[root_index] + root3d
        preds.setdefault(int(data.image_id[m]), []).append(
            RootPrediction(root3d, float(outputs["score"][m]), pose3d))
    return preds


def _root(uv, d_hat, camera, transform):
    from .model import root_from_outputs

    return root_from_outputs(uv, d_hat, camera, transform)


def ground_truth(scenes: list[SceneSample], root_index: int):
    gts = {i: np.array([p.pose3d[root_index] for p in sc.persons]).reshape(-1, 3) for i, sc in enumerate(scenes)}
    poses = {i: np.array([p.pose3d for p in sc.persons]) for i, sc in enumerate(scenes)}
    seqs = {i: sc.sequence for i, sc in enumerate(scenes)}
    return gts, poses, seqs


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: HDNet
    state: TrainState
    final_checkpoint: Path | None
    best_checkpoint: Path | None
    diverged: bool = False
    seconds: float = 0.0


LOG_FIELDS = ("step", "lr", "loss", "hm", "pose", "bins", "idx", "val_median_rel", "val_mean_rel")


def write_log_csv(path: str | Path, log: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in log:
            w.writerow({k: row.get(k, "") for k in LOG_FIELDS})


def validate(model: HDNet, val: PersonSet) -> dict:
    if len(val) == 0:
        return {}
    rel = depth_errors(infer(model, val)["d_hat"], val)
    return {"val_median_rel": float(np.median(rel)), "val_mean_rel": float(np.mean(rel))}


def train(cfg: ExperimentConfig, train_set: PersonSet, val_set: PersonSet | None = None,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          steps: int | None = None, stop_at: int | None = None,
          log_fn: Callable[[str], None] | None = print) -> TrainResult:
    """Optimize an HDNet on ``train_set``.

    ``steps`` overrides the schedule length; ``stop_at`` halts early (the
    schedule is unchanged, which is how a resumable partial run is made).
    Raises :class:`NumericalError` on a non-finite loss after dumping the
    offending batch seed to ``out_dir``.
    """
    t0 = time.perf_counter()
    oc = cfg.optim
    total_steps = steps if steps is not None else oc.steps
    skeleton = cfg.gen.skeleton
    if len(train_set) < oc.batch_size:
        raise ValueError(f"training set has {len(train_set)} persons, fewer than batch size {oc.batch_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.model.cfg != cfg.model:
            raise ValueError("checkpoint model config differs from the experiment config")
        model, state = ck.model, ck.state
        optimizer = Adam(model.parameters(), lr=oc.lr, betas=(oc.beta1, oc.beta2))
        if ck.optim_state:
            optimizer.load_state_dict(ck.optim_state)
    else:
        model = make_model(cfg.model, skeleton, cfg.seed)
        state = TrainState()
        optimizer = Adam(model.parameters(), lr=oc.lr, betas=(oc.beta1, oc.beta2))
    model.train()

    best_path = out / "best.npz" if out is not None else None
    end = min(total_steps, stop_at) if stop_at is not None else total_steps
    while state.step < end:
        k = state.step
        rng = np.random.default_rng([cfg.seed, k])
        idx = np.sort(rng.choice(len(train_set), size=oc.batch_size, replace=False))
        optimizer.lr = step_decay_lr(oc.lr, k, oc.decay_factor, oc.decay_interval)
        model.zero_grad()
        loss, parts = batch_losses(model, train_set.subset(idx), cfg.loss)
        value = float(loss.data)
        if not math.isfinite(value):
            info = {"step": k, "batch_seed": [cfg.seed, k], "indices": idx.tolist(),
                    "parts": {n: float(p.data) for n, p in parts.items() if p is not None}}
            where = ""
            if out is not None:
                dump = out / f"nonfinite_step{k}.json"
                dump.write_text(json.dumps(info, indent=2))
                where = f"; diagnostics in {dump}"
            raise NumericalError(f"non-finite loss at step {k} (batch seed {[cfg.seed, k]}){where}")
        backward(loss)
        optimizer.step()
        state.step = k + 1
        row = {"step": state.step, "lr": optimizer.lr, "loss": value}
        row.update({n: float(p.data) for n, p in parts.items() if p is not None})
        if val_set is not None and (state.step % oc.val_interval == 0 or state.step == total_steps):
            row.update(validate(model, val_set))
            if row.get("val_median_rel", math.inf) < state.best["val_median_rel"]:
                state.best = {"step": state.step, "val_median_rel": row["val_median_rel"]}
                if best_path is not None:
                    save_checkpoint(best_path, model, skeleton, state, optimizer, cfg)
        state.log.append(row)
        if log_fn is not None and (state.step % oc.log_interval == 0 or state.step == end):
            extra = f" val_med={row['val_median_rel']:.4f}" if "val_median_rel" in row else ""
            log_fn(f"step {state.step:5d} lr {optimizer.lr:.2e} loss {value:.4f} "
                   + " ".join(f"{n}={row[n]:.4f}" for n in ("hm", "pose", "bins", "idx") if n in row) + extra)

    final_path = None
    if out is not None:
        final_path = save_checkpoint(out / ("final.npz" if state.step >= total_steps else "last.npz"),
                                     model, skeleton, state, optimizer, cfg)
        write_log_csv(out / "train_log.csv", state.log)
    return TrainResult(model, state, final_path,
                       best_path if best_path is not None and best_path.exists() else None,
                       seconds=time.perf_counter() - t0)
