"""Seeded synthetic multi-person scenes with exact pinhole geometry.

People are random-pose stick figures placed in camera space, projected with a
pinhole camera and rasterized with anti-aliasing. Limb thickness and joint
disk radius are fixed in millimetres, so their pixel size falls off as 1/depth.

Dataset layout (one directory per split)::

    <split>/manifest.json    format tag, version, seed, config and its hash
    <split>/index.jsonl      one scene per line: camera, persons, image file
    <split>/images/NNNNNN.bin  little-endian float32, shape (3, S, S)
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BinConfig, CameraIntrinsics, back_project, bin_index, encode_bins, project
from .skeleton import Skeleton, default_skeleton

FORMAT_NAME = "hdnet-synth"
FORMAT_VERSION = 1

# mean, std in mm for the bone ending at each joint
DEFAULT_BONES = {
    "spine": (250.0, 15.0), "neck": (250.0, 15.0), "head": (200.0, 12.0),
    "l_shoulder": (180.0, 10.0), "r_shoulder": (180.0, 10.0),
    "l_elbow": (290.0, 15.0), "r_elbow": (290.0, 15.0),
    "l_wrist": (260.0, 15.0), "r_wrist": (260.0, 15.0),
    "l_hip": (120.0, 8.0), "r_hip": (120.0, 8.0),
    "l_knee": (430.0, 20.0), "r_knee": (430.0, 20.0),
    "l_ankle": (420.0, 20.0), "r_ankle": (420.0, 20.0),
}


class PlacementError(RuntimeError):
    """No valid placement for a person within the retry budget."""


@dataclass(frozen=True)
class GenConfig:
    num_persons: tuple[int, int] = (1, 3)
    depth_range: tuple[float, float] = (3500.0, 11000.0)
    focal_range: tuple[float, float] = (90.0, 110.0)
    aspect_jitter: float = 0.02
    principal_jitter: float = 4.0
    image_size: int = 128
    bones: dict = field(default_factory=lambda: dict(DEFAULT_BONES))
    joint_radius_mm: float = 80.0
    limb_thickness_mm: float = 50.0
    overlap_probability: float = 0.3
    max_overlap_iou: float = 0.25
    max_retries: int = 100
    noise_std: float = 0.02
    num_sequences: int = 4
    skeleton: Skeleton = field(default_factory=default_skeleton)

    def __post_init__(self):
        lo, hi = self.num_persons
        if not 1 <= lo <= hi:
            raise ValueError(f"num_persons range {self.num_persons} invalid")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError(f"depth_range {self.depth_range} invalid")
        if not 0 < self.focal_range[0] <= self.focal_range[1]:
            raise ValueError(f"focal_range {self.focal_range} invalid")
        if not 0 <= self.overlap_probability <= 1:
            raise ValueError("overlap_probability must lie in [0, 1]")

    def check_bins(self, bins: BinConfig) -> None:
        """Every sampled depth must normalize into [alpha, beta] for every sampled focal."""
        f_lo = self.focal_range[0] * (1 - self.aspect_jitter) ** 0.5
        f_hi = self.focal_range[1] * (1 + self.aspect_jitter) ** 0.5
        if self.depth_range[0] < bins.alpha * f_hi or self.depth_range[1] > bins.beta * f_lo:
            raise ValueError(
                f"depth range {self.depth_range} mm leaves [alpha*f, beta*f] for focal range {self.focal_range}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skeleton"] = self.skeleton.to_dict()
        d["num_persons"] = list(self.num_persons)
        d["depth_range"] = list(self.depth_range)
        d["focal_range"] = list(self.focal_range)
        d["bones"] = {k: list(v) for k, v in self.bones.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        if "skeleton" in d and isinstance(d["skeleton"], dict):
            d["skeleton"] = Skeleton.from_dict(d["skeleton"])
        for key in ("num_persons", "depth_range", "focal_range"):
            if key in d:
                d[key] = tuple(d[key])
        if "bones" in d:
            d["bones"] = {k: tuple(v) for k, v in d["bones"].items()}
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Person:
    pose3d: np.ndarray       # (J, 3) camera space, mm
    pose2d: np.ndarray       # (J, 2) pixels
    bbox: np.ndarray         # (4,) x0, y0, x1, y1 in pixels
    root_depth: float
    bin_coord: float
    truncated: bool

    def bin_target(self, num_bins: int):
        return encode_bins(self.bin_coord, num_bins)


@dataclass
class SceneSample:
    image: np.ndarray        # (3, S, S) float32
    persons: list[Person]
    camera: CameraIntrinsics
    seed: int
    sequence: str = "S1"


# ----------------------------------------------------------------------------
# pose sampling


def _rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _unit(v):
    return v / np.linalg.norm(v)


def _limb_dir(rng, down, lateral, forward, spread_lat, spread_fwd) -> np.ndarray:
    a = rng.uniform(*spread_lat)
    b = rng.uniform(*spread_fwd)
    return _unit(down * math.cos(a) * math.cos(b) + lateral * math.sin(a) + forward * math.sin(b) * math.cos(a))


def sample_relative_pose(rng: np.random.Generator, skel: Skeleton, bones: dict) -> np.ndarray:
    """Root-centred 3D pose (J, 3) in mm; camera axes (Y down, Z forward)."""
    up = np.array([0.0, -1.0, 0.0])
    down = -up
    left = np.array([1.0, 0.0, 0.0])
    fwd = np.array([0.0, 0.0, -1.0])

    def length(name):
        mu, sd = bones[name]
        return max(rng.normal(mu, sd), 0.2 * mu)

    pos = {"pelvis": np.zeros(3)}
    trunk = _unit(up + rng.normal(0, 0.08, 3))
    pos["spine"] = pos["pelvis"] + trunk * length("spine")
    pos["neck"] = pos["spine"] + _unit(trunk + rng.normal(0, 0.08, 3)) * length("neck")
    pos["head"] = pos["neck"] + _unit(trunk + rng.normal(0, 0.15, 3)) * length("head")
    for side, lat in (("l", left), ("r", -left)):
        sh = pos["neck"] + _unit(lat + rng.normal(0, 0.05, 3)) * length(f"{side}_shoulder")
        upper = _limb_dir(rng, down, lat, fwd, (0.15, 1.4), (-0.7, 0.7))
        el = sh + upper * length(f"{side}_elbow")
        fore = _unit(upper + _limb_dir(rng, down, lat, fwd, (-0.3, 0.9), (0.0, 1.5)))
        wr = el + fore * length(f"{side}_wrist")
        hip = pos["pelvis"] + _unit(lat + rng.normal(0, 0.05, 3)) * length(f"{side}_hip")
        thigh = _limb_dir(rng, down, lat, fwd, (0.0, 0.3), (-0.45, 0.45))
        kn = hip + thigh * length(f"{side}_knee")
        shin = _unit(thigh + _limb_dir(rng, down, lat, -fwd, (-0.1, 0.1), (0.0, 0.9)) * 0.8)
        an = kn + shin * length(f"{side}_ankle")
        pos.update({f"{side}_shoulder": sh, f"{side}_elbow": el, f"{side}_wrist": wr,
                    f"{side}_hip": hip, f"{side}_knee": kn, f"{side}_ankle": an})
    pose = np.stack([pos[name] for name in skel.joint_names])
    yaw = rng.uniform(-math.pi / 2, math.pi / 2)
    pose = pose @ _rot_y(yaw).T
    return pose - pose[skel.root_index]


def joint_disk_radius(depth: float, focal: float, cfg: GenConfig) -> float:
    """Rendered joint disk radius in pixels."""
    return cfg.joint_radius_mm * focal / depth


def limb_half_width(depth: float, focal: float, cfg: GenConfig) -> float:
    return 0.5 * cfg.limb_thickness_mm * focal / depth


def pose_bbox(pose2d: np.ndarray, pad: float) -> np.ndarray:
    return np.array([pose2d[:, 0].min() - pad, pose2d[:, 1].min() - pad,
                     pose2d[:, 0].max() + pad, pose2d[:, 1].max() + pad])


def _iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / area if area > 0 else 0.0


def sample_camera(rng: np.random.Generator, cfg: GenConfig) -> CameraIntrinsics:
    f = rng.uniform(*cfg.focal_range)
    aspect = 1.0 + rng.uniform(-cfg.aspect_jitter, cfg.aspect_jitter)
    c = (cfg.image_size - 1) / 2.0
    return CameraIntrinsics(f * math.sqrt(aspect), f / math.sqrt(aspect),
                            c + rng.uniform(-cfg.principal_jitter, cfg.principal_jitter),
                            c + rng.uniform(-cfg.principal_jitter, cfg.principal_jitter))


# ----------------------------------------------------------------------------
# rendering

# fixed per-joint colours so the pose branch can tell joint types apart
_PALETTE = np.array([
    [1.00, 1.00, 1.00], [0.95, 0.85, 0.20], [0.90, 0.55, 0.10], [1.00, 0.20, 0.20],
    [0.20, 0.90, 0.20], [0.10, 0.60, 0.10], [0.50, 1.00, 0.50], [0.20, 0.40, 1.00],
    [0.10, 0.20, 0.60], [0.55, 0.75, 1.00], [0.90, 0.20, 0.90], [0.60, 0.10, 0.60],
    [1.00, 0.60, 1.00], [0.20, 0.90, 0.90], [0.10, 0.55, 0.55], [0.60, 1.00, 1.00],
])


def joint_colors(num_joints: int) -> np.ndarray:
    reps = int(math.ceil(num_joints / len(_PALETTE)))
    return np.tile(_PALETTE, (reps, 1))[:num_joints]


def _segment_distance(px, py, a, b):
    d = b - a
    denom = float(d @ d)
    if denom == 0:
        return np.hypot(px - a[0], py - a[1])
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def render_person(image: np.ndarray, person: Person, edges, color: np.ndarray,
                  radius: float, half_width: float) -> None:
    """Composite one anti-aliased stick figure onto ``image`` (3, S, S) in place."""
    s = image.shape[1]
    pad = radius + half_width + 2
    x0 = max(int(math.floor(person.pose2d[:, 0].min() - pad)), 0)
    y0 = max(int(math.floor(person.pose2d[:, 1].min() - pad)), 0)
    x1 = min(int(math.ceil(person.pose2d[:, 0].max() + pad)), s - 1)
    y1 = min(int(math.ceil(person.pose2d[:, 1].max() + pad)), s - 1)
    if x1 < x0 or y1 < y0:
        return
    py, px = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
    region = image[:, y0:y1 + 1, x0:x1 + 1]

    limb = np.zeros_like(px)
    for i, j in edges:
        dist = _segment_distance(px, py, person.pose2d[i], person.pose2d[j])
        limb = np.maximum(limb, np.clip(half_width + 0.5 - dist, 0.0, 1.0))
    region *= 1.0 - limb
    region += limb * color[:, None, None]

    colors = joint_colors(len(person.pose2d))
    for k, (u, v) in enumerate(person.pose2d):
        cov = np.clip(radius + 0.5 - np.hypot(px - u, py - v), 0.0, 1.0)
        region *= 1.0 - cov
        region += cov * colors[k][:, None, None]


def _background(rng, s: int, noise_std: float) -> np.ndarray:
    base = rng.uniform(0.05, 0.3, size=3)
    ramp = rng.uniform(-0.1, 0.1, size=(3, 2))
    yy, xx = np.mgrid[0:s, 0:s] / (s - 1) - 0.5
    img = base[:, None, None] + ramp[:, 0, None, None] * xx + ramp[:, 1, None, None] * yy
    img = img + rng.normal(0.0, noise_std, size=(3, s, s))
    return img


def generate_scene(cfg: GenConfig, seed: int, bins: BinConfig | None = None,
                   sequence: str = "S1") -> SceneSample:
    """Deterministic scene for ``seed``.

    Root depths are drawn uniformly from ``cfg.depth_range``; placement retries
    only resample pose and image position, never depth, so the depth law is exact.
    """
    bins = bins or BinConfig()
    rng = np.random.default_rng(seed)
    skel = cfg.skeleton
    camera = sample_camera(rng, cfg)
    focal = camera.focal
    s = cfg.image_size
    n_persons = int(rng.integers(cfg.num_persons[0], cfg.num_persons[1] + 1))
    depths = rng.uniform(*cfg.depth_range, size=n_persons)

    persons: list[Person] = []
    for depth in depths:
        radius = joint_disk_radius(depth, focal, cfg)
        pad = radius + 0.5 * cfg.limb_thickness_mm * focal / depth + 1.0
        allow_overlap = rng.uniform() < cfg.overlap_probability
        for _ in range(cfg.max_retries):
            rel = sample_relative_pose(rng, skel, cfg.bones)
            u = rng.uniform(0, s - 1)
            v = rng.uniform(0, s - 1)
            root = back_project(u, v, depth, camera)
            pose3d = rel + root
            if np.any(pose3d[:, 2] <= 0):
                continue
            pose2d = project(pose3d, camera)
            bbox = pose_bbox(pose2d, pad)
            if bbox[0] < 0 or bbox[1] < 0 or bbox[2] > s - 1 or bbox[3] > s - 1:
                continue
            if not allow_overlap and any(_iou(bbox, p.bbox) > cfg.max_overlap_iou for p in persons):
                continue
            d_hat = depth / focal
            persons.append(Person(pose3d, pose2d, bbox, float(depth), bin_index(d_hat, bins), False))
            break
        else:
            raise PlacementError(
                f"could not place person at depth {depth:.0f} mm in {s}x{s} image "
                f"after {cfg.max_retries} retries (seed {seed})")

    image = _background(rng, s, cfg.noise_std)
    for p in sorted(persons, key=lambda p: -p.root_depth):
        color = rng.uniform(0.35, 1.0, size=3)
        render_person(image, p, skel.edges, color, joint_disk_radius(p.root_depth, focal, cfg),
                      limb_half_width(p.root_depth, focal, cfg))
    for p in persons:
        p.truncated = bool(np.any(p.pose2d < 0) or np.any(p.pose2d > s - 1))
    return SceneSample(np.clip(image, 0.0, 1.0).astype(np.float32), persons, camera, int(seed), sequence)


def scene_seed(split_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([split_seed, index]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# ground-truth heatmaps and crops


def render_gt_heatmaps(pose_hm: np.ndarray, size: int | tuple[int, int], sigma: float = 0.75):
    """Sum-normalized Gaussian per joint at heatmap coordinates ``pose_hm`` (J, 2).

    Returns (heatmaps (J, H, W), visible (J,) bool). Joints outside the grid get
    an all-zero map and ``visible = False``.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = (size, size) if isinstance(size, int) else size
    pose_hm = np.asarray(pose_hm, dtype=np.float64)
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    maps = np.zeros((len(pose_hm), h, w))
    visible = np.zeros(len(pose_hm), dtype=bool)
    for j, (uj, vj) in enumerate(pose_hm):
        if not (0 <= uj <= w - 1 and 0 <= vj <= h - 1):
            continue
        g = np.exp(-((u - uj) ** 2 + (v - vj) ** 2) / (2 * sigma ** 2))
        maps[j] = g / g.sum()
        visible[j] = True
    return maps, visible


@dataclass(frozen=True)
class CropTransform:
    """Maps patch pixels p to image pixels origin + p / scale."""

    origin_x: float
    origin_y: float
    scale: float = 1.0

    def to_image(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p / self.scale + np.array([self.origin_x, self.origin_y])

    def to_patch(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64)
        return (q - np.array([self.origin_x, self.origin_y])) * self.scale

    def to_dict(self) -> dict:
        return asdict(self)


def crop_and_resize(image: np.ndarray, center, patch_size: int, out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Cut a fixed-size patch centred on ``center`` and resample it to ``out_size``.

    The patch keeps the original image scale (``patch_size`` is in image
    pixels); regions outside the image are zero. When ``patch_size ==
    out_size`` the origin is snapped to whole pixels and the content is copied
    verbatim.
    """
    c, h, w = image.shape
    cx, cy = float(center[0]), float(center[1])
    scale = out_size / patch_size
    if patch_size == out_size:
        ox, oy = round(cx) - patch_size // 2, round(cy) - patch_size // 2
        if ox >= w or oy >= h or ox + patch_size <= 0 or oy + patch_size <= 0:
            raise ValueError("crop does not intersect the image")
        out = np.zeros((c, out_size, out_size), dtype=image.dtype)
        sx0, sy0 = max(ox, 0), max(oy, 0)
        sx1, sy1 = min(ox + patch_size, w), min(oy + patch_size, h)
        out[:, sy0 - oy:sy1 - oy, sx0 - ox:sx1 - ox] = image[:, sy0:sy1, sx0:sx1]
        return out, CropTransform(float(ox), float(oy), 1.0)

    from scipy.ndimage import map_coordinates

    ox, oy = cx - (patch_size - 1) / 2.0, cy - (patch_size - 1) / 2.0
    tr = CropTransform(ox, oy, scale)
    grid = np.arange(out_size, dtype=np.float64)
    ys = oy + grid / scale
    xs = ox + grid / scale
    if xs[-1] < 0 or ys[-1] < 0 or xs[0] > w - 1 or ys[0] > h - 1:
        raise ValueError("crop does not intersect the image")
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.stack([map_coordinates(image[k], [yy, xx], order=1, mode="constant", cval=0.0)
                    for k in range(c)])
    return out.astype(image.dtype), tr


# ----------------------------------------------------------------------------
# export / load


def _person_to_json(p: Person) -> dict:
    return {
        "pose3d": p.pose3d.tolist(), "pose2d": p.pose2d.tolist(), "bbox": p.bbox.tolist(),
        "root_depth": p.root_depth, "bin_coord": p.bin_coord, "truncated": p.truncated,
    }


def _person_from_json(d: dict) -> Person:
    return Person(np.array(d["pose3d"]), np.array(d["pose2d"]), np.array(d["bbox"]),
                  float(d["root_depth"]), float(d["bin_coord"]), bool(d["truncated"]))


def _gen_one(args):
    cfg, bins, split_seed, i = args
    seq = f"S{i % cfg.num_sequences + 1}"
    return generate_scene(cfg, scene_seed(split_seed, i), bins, seq)


def worker_count() -> int:
    return max(1, int(os.environ.get("HDNET_WORKERS", "1")))


def generate_split(cfg: GenConfig, count: int, seed: int, bins: BinConfig | None = None) -> list[SceneSample]:
    """Scenes ``0..count-1`` of a split, in order, fanned out over HDNET_WORKERS processes."""
    bins = bins or BinConfig()
    cfg.check_bins(bins)
    jobs = [(cfg, bins, seed, i) for i in range(count)]
    workers = worker_count()
    if workers > 1 and count > 1:
        from multiprocessing import Pool
        with Pool(workers) as pool:
            return pool.map(_gen_one, jobs, chunksize=16)
    return [_gen_one(j) for j in jobs]


def export_split(out_dir: str | Path, cfg: GenConfig, count: int, seed: int,
                 bins: BinConfig | None = None, split: str = "train", extra_manifest: dict | None = None) -> Path:
    """Generate ``count`` scenes and write them in the dataset format."""
    bins = bins or BinConfig()
    scenes = generate_split(cfg, count, seed, bins)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    with open(out / "index.jsonl", "w") as idx:
        for i, sc in enumerate(scenes):
            rel = f"images/{i:06d}.bin"
            sc.image.astype("<f4").tofile(out / rel)
            idx.write(json.dumps({
                "image_id": i, "file": rel, "shape": list(sc.image.shape), "dtype": "float32",
                "seed": sc.seed, "sequence": sc.sequence, "camera": sc.camera.to_dict(),
                "persons": [_person_to_json(p) for p in sc.persons],
            }) + "\n")
    manifest = {
        "format": FORMAT_NAME, "format_version": FORMAT_VERSION, "split": split,
        "count": count, "seed": seed, "config_hash": cfg.hash(), "gen_config": cfg.to_dict(),
        "bin_config": asdict(bins),
    }
    manifest.update(extra_manifest or {})
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return out


def read_manifest(split_dir: str | Path) -> dict:
    path = Path(split_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT_NAME or manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format {manifest.get('format')!r} "
                         f"v{manifest.get('format_version')}")
    return manifest


def iter_index(split_dir: str | Path):
    with open(Path(split_dir) / "index.jsonl") as f:
        for line in f:
            if line.strip():
                yield json.loads(line)


def load_scene(split_dir: str | Path, record: dict) -> SceneSample:
    shape = tuple(record["shape"])
    image = np.fromfile(Path(split_dir) / record["file"], dtype="<f4").reshape(shape)
    return SceneSample(image, [_person_from_json(p) for p in record["persons"]],
                       CameraIntrinsics.from_dict(record["camera"]), int(record["seed"]),
                       record.get("sequence", "S1"))


def load_split(split_dir: str | Path) -> list[SceneSample]:
    read_manifest(split_dir)
    return [load_scene(split_dir, r) for r in iter_index(split_dir)]
