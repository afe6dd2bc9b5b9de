"""Schema for bringing licensed multi-person 3D pose data into the split format.

No real-dataset loader ships with this package. Someone holding a licence for
a studio capture corpus (Human3.6M, MuCo-3DHP, MuPoTS-3D or similar) converts
each frame into one JSON object of the form below, runs it through
:func:`to_index_record`, and writes the results as ``index.jsonl`` next to a
``manifest.json`` and the float32 image blobs, exactly as
:func:`hdnet.synth.export_split` does. Every downstream command (train, eval,
ablate) then works unchanged.

Source record, one per frame::

    {
      "image_id": 17,                      # unique integer within the split
      "image": "frames/000017.bin",        # float32 C x H x W blob, little endian
      "shape": [3, 256, 256],
      "sequence": "TS3",                   # grouping key for per-sequence rows
      "camera": {"fx": 1145.0, "fy": 1144.0, "cx": 512.5, "cy": 515.4},
      "persons": [
        {
          "pose3d": [[X, Y, Z], ...],      # camera space, millimetres, one row per skeleton joint,
                                           # ordered as the skeleton's joint list
          "bbox": [x0, y0, x1, y1]         # optional; derived from the 2D pose when absent
        }
      ]
    }

Camera convention: X right, Y down, Z along the optical axis; pixel centres at
integer coordinates. The joint order must match the skeleton TOML used by the
experiment (``gen.skeleton``); remap joints before conversion, not after.
"""
from __future__ import annotations

import numpy as np

from .geometry import BinConfig, CameraIntrinsics, bin_index, normalize_depth, project
from .skeleton import Skeleton
from .synth import pose_bbox

REQUIRED = ("image_id", "image", "shape", "camera", "persons")


class SchemaError(ValueError):
    """A source record does not follow the documented schema."""


def validate_record(rec: dict, skeleton: Skeleton) -> None:
    """Raise :class:`SchemaError` naming the first problem in ``rec``."""
    missing = [k for k in REQUIRED if k not in rec]
    if missing:
        raise SchemaError(f"record {rec.get('image_id', '?')}: missing fields {missing}")
    shape = rec["shape"]
    if len(shape) != 3 or shape[0] != 3:
        raise SchemaError(f"record {rec['image_id']}: shape must be [3, H, W], got {shape}")
    try:
        CameraIntrinsics.from_dict(rec["camera"])
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"record {rec['image_id']}: bad camera ({e})") from None
    for k, p in enumerate(rec["persons"]):
        pose = np.asarray(p.get("pose3d"), dtype=np.float64)
        if pose.shape != (skeleton.num_joints, 3):
            raise SchemaError(f"record {rec['image_id']} person {k}: pose3d must be "
                              f"{skeleton.num_joints} x 3, got {pose.shape}")
        if not np.all(np.isfinite(pose)) or np.any(pose[:, 2] <= 0):
            raise SchemaError(f"record {rec['image_id']} person {k}: pose3d needs finite points in front of the camera")


def to_index_record(rec: dict, skeleton: Skeleton, bins: BinConfig, pad: float = 4.0) -> dict:
    """Convert a validated source record into one ``index.jsonl`` line (as a dict).

    Derives the 2D pose by exact projection, the root depth, the fractional
    bin coordinate and, when absent, a padded bounding box.
    """
    validate_record(rec, skeleton)
    cam = CameraIntrinsics.from_dict(rec["camera"])
    _, h, w = rec["shape"]
    persons = []
    for p in rec["persons"]:
        pose3d = np.asarray(p["pose3d"], dtype=np.float64)
        pose2d = project(pose3d, cam)
        depth = float(pose3d[skeleton.root_index, 2])
        bbox = np.asarray(p["bbox"], dtype=np.float64) if "bbox" in p else pose_bbox(pose2d, pad)
        persons.append({
            "pose3d": pose3d.tolist(), "pose2d": pose2d.tolist(), "bbox": bbox.tolist(),
            "root_depth": depth, "bin_coord": bin_index(float(normalize_depth(depth, cam)), bins),
            "truncated": bool(np.any(pose2d < 0) or np.any(pose2d[:, 0] > w - 1) or np.any(pose2d[:, 1] > h - 1)),
        })
    return {"image_id": int(rec["image_id"]), "file": rec["image"], "shape": list(rec["shape"]),
            "dtype": "float32", "seed": -1, "sequence": rec.get("sequence", "S1"),
            "camera": cam.to_dict(), "persons": persons}


__all__ = ["REQUIRED", "SchemaError", "validate_record", "to_index_record"]
