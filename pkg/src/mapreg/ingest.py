"""Local maps from precomputed detections via pinhole back-projection.

Raw detection files are JSON::

    {"scene_id": str (optional),
     "images": [{"intrinsics": {"fx", "fy", "cx", "cy"}, "width", "height",
                 "camera_xy_gt": [x, y] (optional), "heading_gt": float (optional),
                 "detections": [{"label", "bbox": [x0, y0, x1, y1], "depth",
                                 "gt_object_id": int (optional)}]}],
     "objects": [{"id", "label", "xy": [x, y]}] (optional ground truth)}

Ground-truth poses, when present, are given in an arbitrary world frame and
are re-expressed in the frame of the first image.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import MIN_DETECTIONS, LocalMap, Scene
from .errors import InvalidDepth, InvalidIntrinsics, TooFewDetections, UnknownClass, ValidationError
from .geometry import rotation


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidIntrinsics(f"{name} must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidIntrinsics(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def from_dict(cls, d) -> "Intrinsics":
        if isinstance(d, Intrinsics):
            return d
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))
        except (KeyError, TypeError) as exc:
            raise InvalidIntrinsics(f"malformed intrinsics: {exc!r}") from None


def _check_bbox(bbox, width=None, height=None) -> np.ndarray:
    b = np.asarray(bbox, dtype=np.float64)
    if b.shape != (4,) or not np.all(np.isfinite(b)):
        raise ValidationError(f"bbox must be 4 finite numbers, got {bbox!r}")
    x0, y0, x1, y1 = b
    if not (x0 < x1 and y0 < y1):
        raise ValidationError(f"bbox corners out of order: {bbox!r}")
    if width is not None and not (0 <= x0 and x1 <= width and 0 <= y0 and y1 <= height):
        raise ValidationError(f"bbox {bbox!r} outside the {width}x{height} image")
    return b


def project_detection(intrinsics, bbox, depth: float) -> np.ndarray:
    """Ground-plane position ``(depth * (u - cx) / fx, depth)`` of the bbox centre."""
    K = Intrinsics.from_dict(intrinsics)
    depth = float(depth)
    if not (math.isfinite(depth) and depth > 0):
        raise InvalidDepth(f"depth must be positive, got {depth}")
    b = _check_bbox(bbox)
    u = 0.5 * (b[0] + b[2])
    return np.array([depth * (u - K.cx) / K.fx, depth])


def load_raw(source) -> dict:
    if isinstance(source, dict):
        return source
    path = Path(source)
    if not path.exists():
        raise ValidationError(f"detection file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def _class_id(label, vocab: dict) -> int:
    try:
        return vocab[label]
    except KeyError:
        raise UnknownClass(f"label {label!r} not in vocabulary {sorted(vocab)}") from None


def build_local_maps(raw, vocabulary: Sequence[str]) -> list[LocalMap]:
    """One map per image: projected coordinates, class ids, bboxes scaled to [0, 1]."""
    data = load_raw(raw)
    vocab = {label: k for k, label in enumerate(vocabulary)}
    images = data.get("images")
    if not images:
        raise ValidationError("detection file lists no images")
    maps = []
    for i, img in enumerate(images):
        K = Intrinsics.from_dict(img.get("intrinsics"))
        try:
            w, h = float(img["width"]), float(img["height"])
        except (KeyError, TypeError):
            raise ValidationError(f"image {i}: missing width/height") from None
        if not (w > 0 and h > 0):
            raise ValidationError(f"image {i}: non-positive image size")
        dets = img.get("detections", [])
        if len(dets) < MIN_DETECTIONS:
            raise TooFewDetections(f"image {i} has {len(dets)} detections, need at least {MIN_DETECTIONS}")
        classes, xy, boxes, gt = [], [], [], []
        for det in dets:
            b = _check_bbox(det["bbox"], w, h)
            classes.append(_class_id(det["label"], vocab))
            xy.append(project_detection(K, b, det["depth"]))
            boxes.append(b / np.array([w, h, w, h]))
            gid = det.get("gt_object_id")
            gt.append(-1 if gid is None else int(gid))
        maps.append(LocalMap(
            camera_id=int(img.get("camera_id", i)), classes=classes, xy=np.array(xy),
            bbox=np.array(boxes), gt_object_id=gt,
        ))
    return maps


def ingest_scene(raw, vocabulary: Sequence[str], scene_id: str | None = None) -> Scene:
    """Local maps plus, if the file carries it, ground truth in the first image's frame."""
    data = load_raw(raw)
    maps = build_local_maps(data, vocabulary)
    vocab = {label: k for k, label in enumerate(vocabulary)}
    sid = scene_id or str(data.get("scene_id", "ingested"))
    images = data["images"]
    objs = data.get("objects")
    poses = [(img.get("camera_xy_gt"), img.get("heading_gt")) for img in images]
    if not objs or any(xy is None or hd is None for xy, hd in poses):
        return Scene(scene_id=sid, n_classes=len(vocabulary), maps=maps)

    cam0 = np.asarray(poses[0][0], dtype=np.float64)
    R0 = rotation(float(poses[0][1]) - np.pi / 2)

    def to_ref(p):
        return (np.asarray(p, dtype=np.float64) - cam0) @ R0.T

    for m, (xy, hd) in zip(maps, poses):
        m.camera_xy_gt = to_ref(xy)
        m.heading_gt = float(hd) - float(poses[0][1]) + np.pi / 2
    return Scene(
        scene_id=sid, n_classes=len(vocabulary), maps=maps,
        object_ids=np.array([int(o["id"]) for o in objs], dtype=np.int64),
        object_classes=np.array([_class_id(o["label"], vocab) for o in objs], dtype=np.int64),
        object_xy=to_ref([o["xy"] for o in objs]).reshape(-1, 2),
        world_scale=1.0,
    )
