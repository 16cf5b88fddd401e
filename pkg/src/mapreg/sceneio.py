"""Scene JSON files and dataset directories.

Scene file layout (UTF-8, one scene per file, coordinates in metres, ground
truth in the frame of map 0)::

    {"scene_id": str, "world_scale": float, "n_classes": int, "seed": int | null,
     "objects": [{"id": int, "class": int, "xy": [x, y]}],
     "maps": [{"camera_id": int, "camera_xy_gt": [x, y] | null, "heading_gt": float | null,
               "detections": [{"class": int, "local_xy": [x, y],
                               "bbox": [x0, y0, x1, y1] | null, "gt_object_id": int | null}]}]}

A dataset directory holds ``manifest.json`` and one sub-directory per split.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datagen import LocalMap, Scene
from .errors import ValidationError

SCHEMA_VERSION = 1


def _f(x) -> float:
    return float(x)


def _xy(v):
    return None if v is None else [_f(v[0]), _f(v[1])]


def map_to_dict(m: LocalMap) -> dict:
    dets = []
    for k in range(len(m)):
        box = m.bbox[k]
        gid = int(m.gt_object_id[k])
        dets.append({
            "class": int(m.classes[k]),
            "local_xy": _xy(m.xy[k]),
            "bbox": None if np.any(np.isnan(box)) else [_f(b) for b in box],
            "gt_object_id": None if gid < 0 else gid,
        })
    return {
        "camera_id": int(m.camera_id),
        "camera_xy_gt": _xy(m.camera_xy_gt),
        "heading_gt": None if m.heading_gt is None else _f(m.heading_gt),
        "detections": dets,
    }


def map_from_dict(d: dict) -> LocalMap:
    dets = d.get("detections", [])
    n = len(dets)
    bbox = np.full((n, 4), np.nan)
    for k, det in enumerate(dets):
        if det.get("bbox") is not None:
            bbox[k] = det["bbox"]
    return LocalMap(
        camera_id=int(d["camera_id"]),
        classes=np.array([int(det["class"]) for det in dets], dtype=np.int64),
        xy=np.array([det["local_xy"] for det in dets], dtype=np.float64).reshape(n, 2),
        bbox=bbox,
        gt_object_id=np.array([-1 if det.get("gt_object_id") is None else int(det["gt_object_id"])
                               for det in dets], dtype=np.int64),
        camera_xy_gt=d.get("camera_xy_gt"),
        heading_gt=d.get("heading_gt"),
    )


def scene_to_dict(scene: Scene) -> dict:
    objects = []
    if scene.object_xy is not None:
        for i, c, xy in zip(scene.object_ids, scene.object_classes, scene.object_xy):
            objects.append({"id": int(i), "class": int(c), "xy": _xy(xy)})
    return {
        "scene_id": scene.scene_id,
        "world_scale": _f(scene.world_scale),
        "n_classes": int(scene.n_classes),
        "seed": None if scene.seed is None else int(scene.seed),
        "objects": objects,
        "maps": [map_to_dict(m) for m in scene.maps],
    }


def scene_from_dict(d: dict) -> Scene:
    try:
        objs = d.get("objects") or []
        return Scene(
            scene_id=str(d["scene_id"]),
            n_classes=int(d["n_classes"]),
            maps=[map_from_dict(m) for m in d["maps"]],
            object_ids=np.array([int(o["id"]) for o in objs], dtype=np.int64),
            object_classes=np.array([int(o["class"]) for o in objs], dtype=np.int64),
            object_xy=np.array([o["xy"] for o in objs], dtype=np.float64).reshape(-1, 2) if objs else None,
            world_scale=float(d.get("world_scale", 1.0)),
            seed=d.get("seed"),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed scene record: {exc!r}") from None


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, ensure_ascii=False) + "\n"


def write_scene(scene: Scene, path) -> None:
    Path(path).write_text(dumps(scene_to_dict(scene)), encoding="utf-8")


def read_scene(path) -> Scene:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"scene file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return scene_from_dict(data)


def write_dataset(root, splits: dict[str, list[Scene]], config: dict) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCHEMA_VERSION, "config": config, "splits": {}}
    for split, scenes in splits.items():
        d = root / split
        d.mkdir(exist_ok=True)
        entries = []
        for s in scenes:
            name = f"{s.scene_id}.json"
            write_scene(s, d / name)
            entries.append({"file": f"{split}/{name}", "scene_id": s.scene_id, "seed": s.seed})
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(dumps(manifest), encoding="utf-8")
    return root


def read_dataset(root, split: str) -> list[Scene]:
    root = Path(root)
    mf = root / "manifest.json"
    if not mf.exists():
        raise ValidationError(f"dataset manifest not found: {mf}")
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    if split not in manifest["splits"]:
        raise ValidationError(f"{root}: no split named {split!r}")
    return [read_scene(root / e["file"]) for e in manifest["splits"][split]]
