"""Root-localization and absolute-pose metrics.

* MRPE: mean Euclidean root error plus mean absolute per-axis error.
* Root AP/AR: a matched prediction within the distance threshold is a true
  positive; AP is the 101-point interpolated area under the score-swept
  precision/recall curve, AR the recall with every prediction kept.
* 3DPCK: share of joints within 150 mm, without (abs) or after (rel) root alignment.

Matching is score-independent: globally-nearest-first greedy with ties broken
by (prediction index, ground-truth index), or optimal assignment on request.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_THRESHOLDS = (250.0, 200.0, 150.0, 100.0)
PCK_THRESHOLD = 150.0


@dataclass
class RootPrediction:
    root3d: np.ndarray
    score: float = 1.0
    pose3d: np.ndarray | None = None

    def __post_init__(self):
        self.root3d = np.asarray(self.root3d, dtype=np.float64)
        if self.root3d.shape != (3,) or not np.all(np.isfinite(self.root3d)):
            raise ValueError(f"root3d must be 3 finite numbers, got {self.root3d}")
        if self.pose3d is not None:
            self.pose3d = np.asarray(self.pose3d, dtype=np.float64)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]
    unmatched_preds: list[int] = field(default_factory=list)
    unmatched_gts: list[int] = field(default_factory=list)


def _roots(items) -> np.ndarray:
    rows = [it.root3d if isinstance(it, RootPrediction) else it for it in items]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def match_roots(preds, gts, mode: str = "greedy") -> MatchResult:
    """Pair predictions with ground-truth roots by 3D distance.

    ``preds``/``gts`` are sequences of RootPrediction or (3,) points.
    """
    p, g = _roots(preds), _roots(gts)
    if len(p) == 0 or len(g) == 0:
        return MatchResult([], list(range(len(p))), list(range(len(g))))
    dist = np.linalg.norm(p[:, None, :] - g[None, :, :], axis=-1)
    if mode == "greedy":
        order = sorted((dist[i, j], i, j) for i in range(len(p)) for j in range(len(g)))
        used_p, used_g, pairs = set(), set(), []
        for d, i, j in order:
            if i in used_p or j in used_g:
                continue
            used_p.add(i)
            used_g.add(j)
            pairs.append((i, j, float(d)))
            if len(pairs) == min(len(p), len(g)):
                break
    elif mode == "optimal":
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(dist)
        pairs = sorted((int(i), int(j), float(dist[i, j])) for i, j in zip(rows, cols))
    else:
        raise ValueError(f"unknown matching mode {mode!r}")
    mp = {i for i, _, _ in pairs}
    mg = {j for _, j, _ in pairs}
    return MatchResult(pairs, [i for i in range(len(p)) if i not in mp],
                       [j for j in range(len(g)) if j not in mg])


def mrpe(pred_roots, gt_roots) -> dict[str, float]:
    """Mean root position error over matched (pred, gt) root pairs, in mm."""
    p, g = _roots(pred_roots), _roots(gt_roots)
    if len(p) == 0:
        raise ValueError("mrpe needs at least one matched pair")
    if p.shape != g.shape:
        raise ValueError(f"pred/gt counts differ: {len(p)} vs {len(g)}")
    diff = p - g
    axes = np.abs(diff).mean(axis=0)
    return {"mrpe": float(np.linalg.norm(diff, axis=1).mean()),
            "mrpe_x": float(axes[0]), "mrpe_y": float(axes[1]), "mrpe_z": float(axes[2])}


@dataclass
class ImageEval:
    """Per-image inputs to the AP/AR sweep."""

    preds: list[RootPrediction]
    gts: np.ndarray  # (G, 3)


def _scored_distances(images: Iterable[ImageEval], mode: str) -> tuple[list[tuple[float, float]], int]:
    scored, num_gt = [], 0
    for im in images:
        gts = _roots(im.gts)
        num_gt += len(gts)
        m = match_roots(im.preds, gts, mode)
        dist = {i: d for i, _, d in m.pairs}
        for i, pr in enumerate(im.preds):
            scored.append((float(pr.score), dist.get(i, np.inf)))
    return scored, num_gt


def ap_ar_from_scored(scored: Sequence[tuple[float, float]], num_gt: int, threshold: float) -> tuple[float, float]:
    """AP/AR for (score, matched distance) records; unmatched predictions carry inf."""
    if num_gt == 0:
        return float("nan"), float("nan")
    order = sorted(range(len(scored)), key=lambda k: (-scored[k][0], k))
    tp = n = 0
    points: list[tuple[int, int]] = []  # (tp, n) at the end of every score tie group
    for pos, k in enumerate(order):
        n += 1
        tp += scored[k][1] < threshold
        nxt = order[pos + 1] if pos + 1 < len(order) else None
        if nxt is None or scored[nxt][0] != scored[k][0]:
            points.append((tp, n))
    total = Fraction(0)
    for r in range(101):
        # recall >= r/100  <=>  100 * tp >= r * num_gt
        best = max((Fraction(t, m) for t, m in points if 100 * t >= r * num_gt), default=Fraction(0))
        total += best
    return float(total / 101), (tp / num_gt)


def root_ap_ar(images: Sequence[ImageEval], thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
               mode: str = "greedy") -> dict[float, dict[str, float]]:
    scored, num_gt = _scored_distances(images, mode)
    return {float(t): dict(zip(("AP", "AR"), ap_ar_from_scored(scored, num_gt, t))) for t in thresholds}


def pck(pred_poses, gt_poses, mode: str = "absolute", threshold: float = PCK_THRESHOLD,
        root_index: int = 0, per_joint: bool = False):
    """Percentage of joints within ``threshold`` mm over matched persons.

    ``mode`` is ``"absolute"`` or ``"root-aligned"``.
    """
    pred = np.asarray(pred_poses, dtype=np.float64)
    gt = np.asarray(gt_poses, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("pck needs at least one matched person")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    if pred.shape != gt.shape:
        raise ValueError(f"pose shapes differ: {pred.shape} vs {gt.shape}")
    if mode in ("root-aligned", "rel", "relative"):
        pred = pred - pred[:, root_index:root_index + 1] + gt[:, root_index:root_index + 1]
    elif mode not in ("absolute", "abs"):
        raise ValueError(f"unknown pck mode {mode!r}")
    hit = np.linalg.norm(pred - gt, axis=-1) < threshold
    if per_joint:
        return 100.0 * hit.mean(axis=0)
    return float(100.0 * hit.mean())


# ----------------------------------------------------------------------------
# dataset-level evaluation and file formats


def read_predictions(path: str | Path) -> dict[int, list[RootPrediction]]:
    """Prediction JSON lines: ``{"image_id", "score", "root3d", "pose3d"?}``."""
    out: dict[int, list[RootPrediction]] = defaultdict(list)
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[int(rec["image_id"])].append(
                    RootPrediction(rec["root3d"], float(rec.get("score", 1.0)), rec.get("pose3d")))
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{n}: bad prediction record ({e})") from None
    return dict(out)


def write_predictions(path: str | Path, preds: dict[int, list[RootPrediction]]) -> None:
    with open(path, "w") as f:
        for image_id in sorted(preds):
            for p in preds[image_id]:
                rec = {"image_id": image_id, "score": p.score, "root3d": p.root3d.tolist()}
                if p.pose3d is not None:
                    rec["pose3d"] = p.pose3d.tolist()
                f.write(json.dumps(rec) + "\n")


METRIC_GROUPS = ("depth", "mrpe", "ap", "ar", "pck")


def evaluate(preds: dict[int, list[RootPrediction]], gts: dict[int, np.ndarray],
             gt_poses: dict[int, np.ndarray] | None = None,
             sequences: dict[int, str] | None = None,
             thresholds: Sequence[float] = DEFAULT_THRESHOLDS, mode: str = "greedy",
             root_index: int = 0) -> dict[str, dict[str, float]]:
    """Full metric suite, overall (``"all"``) and per sequence.

    Besides MRPE, AP/AR and 3DPCK, each row carries the median and mean
    relative root-depth error |z - z_gt| / z_gt over matched persons.

    ``gts`` maps image id to (G, 3) roots; ``gt_poses`` to (G, J, 3) poses.
    """
    seq_of = sequences or {}
    groups: dict[str, list[int]] = defaultdict(list)
    for image_id in sorted(gts):
        groups["all"].append(image_id)
        if image_id in seq_of:
            groups[seq_of[image_id]].append(image_id)
    results = {}
    for name in sorted(groups, key=lambda s: (s != "all", s)):
        ids = groups[name]
        p_roots, g_roots, p_poses, g_poses = [], [], [], []
        images = []
        for image_id in ids:
            pr = preds.get(image_id, [])
            g = _roots(gts[image_id])
            images.append(ImageEval(pr, g))
            for i, j, _ in match_roots(pr, g, mode).pairs:
                p_roots.append(pr[i].root3d)
                g_roots.append(g[j])
                if gt_poses is not None and pr[i].pose3d is not None:
                    p_poses.append(pr[i].pose3d)
                    g_poses.append(gt_poses[image_id][j])
        row: dict[str, float] = {}
        if p_roots:
            pz, gz = np.asarray(p_roots)[:, 2], np.asarray(g_roots)[:, 2]
            rel = np.abs(pz - gz) / gz
            row.update(depth_median_rel=float(np.median(rel)), depth_mean_rel=float(np.mean(rel)))
            row.update(mrpe(p_roots, g_roots))
        else:
            row.update({k: float("nan") for k in
                        ("depth_median_rel", "depth_mean_rel", "mrpe", "mrpe_x", "mrpe_y", "mrpe_z")})
        for t, v in root_ap_ar(images, thresholds, mode).items():
            row[f"ap_{t:g}"] = v["AP"]
            row[f"ar_{t:g}"] = v["AR"]
        if p_poses:
            row["pck_abs"] = pck(p_poses, g_poses, "absolute", root_index=root_index)
            row["pck_rel"] = pck(p_poses, g_poses, "root-aligned", root_index=root_index)
        else:
            row["pck_abs"] = row["pck_rel"] = float("nan")
        results[name] = row
    return results


def select_columns(row: dict[str, float], groups: Sequence[str] | None) -> dict[str, float]:
    if not groups:
        return row
    bad = set(groups) - set(METRIC_GROUPS)
    if bad:
        raise ValueError(f"unknown metric groups {sorted(bad)}; choose from {METRIC_GROUPS}")
    return {k: v for k, v in row.items() if k.split("_")[0] in groups}


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    """One row per (variant, sequence); metric columns in first-seen order."""
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
