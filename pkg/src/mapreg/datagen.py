"""Synthetic scenes: objects in a box, cameras that each see a random subset.

Local-map frame convention: the camera sits at the origin looking along +y, with
+x to its right.  A camera with world viewing direction ``h`` (radians, CCW from
+x) maps a world point ``p`` to ``rotation(h - pi/2) @ (p - camera)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import UnsatisfiableVisibility, ValidationError
from .geometry import rotation

MIN_DETECTIONS = 3
MAX_RESAMPLES = 1000
HEADING_JITTER = np.deg2rad(30.0)


@dataclass
class LocalMap:
    """Detections of one camera, expressed in that camera's frame.

    ``bbox`` rows are NaN for detections without a box; ``gt_object_id`` is -1
    when unknown.  ``camera_xy_gt``/``heading_gt`` are the camera pose in the
    ground-truth frame when available.
    """

    camera_id: int
    classes: np.ndarray
    xy: np.ndarray
    bbox: np.ndarray | None = None
    gt_object_id: np.ndarray | None = None
    camera_xy_gt: np.ndarray | None = None
    heading_gt: float | None = None

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        n = len(self.classes)
        if self.xy.shape[0] != n:
            raise ValidationError("classes and xy must have the same length")
        if not np.all(np.isfinite(self.xy)):
            raise ValidationError(f"map {self.camera_id}: non-finite detection coordinates")
        self.bbox = np.full((n, 4), np.nan) if self.bbox is None else np.asarray(self.bbox, dtype=np.float64).reshape(n, 4)
        if self.gt_object_id is None:
            self.gt_object_id = np.full(n, -1, dtype=np.int64)
        else:
            self.gt_object_id = np.asarray(self.gt_object_id, dtype=np.int64).reshape(n)
        if self.camera_xy_gt is not None:
            self.camera_xy_gt = np.asarray(self.camera_xy_gt, dtype=np.float64).reshape(2)

    def __len__(self):
        return len(self.classes)


@dataclass
class GlobalScene:
    """World-frame ground truth of a synthetic scene."""

    scene_id: str
    seed: int
    world_scale: float
    n_classes: int
    object_classes: np.ndarray
    object_xy: np.ndarray
    camera_xy: np.ndarray
    camera_heading: np.ndarray

    def to_reference_frame(self, points: np.ndarray, ref: int = 0) -> np.ndarray:
        """Express world points in the local frame of camera ``ref``."""
        R = rotation(self.camera_heading[ref] - np.pi / 2)
        return (np.asarray(points) - self.camera_xy[ref]) @ R.T


@dataclass
class Scene:
    """A set of local maps plus ground truth expressed in the frame of map 0.

    This is the unit every downstream stage consumes and the content of one
    scene JSON file.  ``object_xy`` may be None for unlabelled data.
    """

    scene_id: str
    n_classes: int
    maps: list[LocalMap]
    object_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    object_classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    object_xy: np.ndarray | None = None
    world_scale: float = 1.0
    seed: int | None = None

    @property
    def has_ground_truth(self) -> bool:
        return self.object_xy is not None and all(m.camera_xy_gt is not None for m in self.maps)


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 7
    n_classes: int = 5
    n_maps: int = 8
    phi: float = 1.0
    delta_xy: float = 0.0
    world_scale: float = 10.0
    seed: int = 0
    unique_classes: bool = False

    def validate(self):
        if self.n_objects < MIN_DETECTIONS:
            raise ValidationError(f"n_objects must be >= {MIN_DETECTIONS}")
        if self.n_classes < 1:
            raise ValidationError("n_classes must be >= 1")
        if self.n_maps < 2:
            raise ValidationError("n_maps must be >= 2")
        if not 0.0 < self.phi <= 1.0:
            raise ValidationError("phi must lie in (0, 1]")
        if self.delta_xy < 0:
            raise ValidationError("delta_xy must be >= 0")
        if not self.world_scale > 0:
            raise ValidationError("world_scale must be positive")
        if self.unique_classes and self.n_classes < self.n_objects:
            raise ValidationError("unique_classes needs n_classes >= n_objects")
        return self


def _noise(rng, n, delta_xy):
    mag = rng.uniform(0.0, 1.0, n) * delta_xy
    ang = rng.uniform(0.0, 2 * np.pi, n)
    return mag[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])


def inject_map_noise(local_map: LocalMap, delta_xy: float, seed) -> LocalMap:
    """Displace each detection by ``U[0, delta_xy]`` metres in a uniform random direction."""
    if delta_xy < 0:
        raise ValidationError("delta_xy must be >= 0")
    rng = np.random.default_rng(seed)
    disp = _noise(rng, len(local_map), delta_xy)
    return replace(local_map, xy=local_map.xy + disp, classes=local_map.classes.copy(),
                   bbox=local_map.bbox.copy(), gt_object_id=local_map.gt_object_id.copy())


def generate_scene(config: SceneConfig, scene_id: str | None = None) -> tuple[GlobalScene, list[LocalMap]]:
    """Sample a scene and its local maps.

    Geometry, visibility and map noise use independent streams derived from
    ``config.seed`` so that changing ``delta_xy`` alone leaves the layout, poses
    and visibility untouched.
    """
    cfg = config.validate()
    geo_ss, noise_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(geo_ss)
    obj_xy = rng.uniform(-1.0, 1.0, (cfg.n_objects, 2)) * cfg.world_scale
    if cfg.unique_classes:
        obj_cls = rng.permutation(cfg.n_classes)[: cfg.n_objects]
    else:
        obj_cls = rng.integers(0, cfg.n_classes, cfg.n_objects)

    cams, headings, masks = [], [], []
    for m in range(cfg.n_maps):
        for _ in range(MAX_RESAMPLES):
            cam = rng.uniform(-1.0, 1.0, 2) * cfg.world_scale
            mask = rng.random(cfg.n_objects) < cfg.phi
            if mask.sum() >= MIN_DETECTIONS:
                break
        else:
            raise UnsatisfiableVisibility(
                f"map {m}: {MAX_RESAMPLES} draws never gave {MIN_DETECTIONS} detections "
                f"(phi={cfg.phi}, n_objects={cfg.n_objects})")
        d = obj_xy[mask].mean(axis=0) - cam
        h = np.arctan2(d[1], d[0]) + rng.uniform(-HEADING_JITTER, HEADING_JITTER)
        cams.append(cam)
        headings.append(h)
        masks.append(mask)

    scene = GlobalScene(
        scene_id=scene_id if scene_id is not None else f"scene-{cfg.seed}",
        seed=cfg.seed, world_scale=cfg.world_scale, n_classes=cfg.n_classes,
        object_classes=obj_cls, object_xy=obj_xy,
        camera_xy=np.array(cams), camera_heading=np.array(headings),
    )
    cam_ref = scene.to_reference_frame(scene.camera_xy)
    noise_seeds = noise_ss.spawn(cfg.n_maps)
    maps = []
    for m, mask in enumerate(masks):
        ids = np.flatnonzero(mask)
        R = rotation(headings[m] - np.pi / 2)
        local = LocalMap(
            camera_id=m, classes=obj_cls[ids], xy=(obj_xy[ids] - cams[m]) @ R.T,
            gt_object_id=ids, camera_xy_gt=cam_ref[m],
            heading_gt=float(headings[m] - headings[0] + np.pi / 2),
        )
        if cfg.delta_xy > 0:
            local = inject_map_noise(local, cfg.delta_xy, noise_seeds[m])
        maps.append(local)
    return scene, maps


def to_scene(global_scene: GlobalScene, maps: list[LocalMap]) -> Scene:
    """Package generated maps with ground truth re-expressed in map 0's frame."""
    n = len(global_scene.object_xy)
    return Scene(
        scene_id=global_scene.scene_id, n_classes=global_scene.n_classes, maps=maps,
        object_ids=np.arange(n), object_classes=global_scene.object_classes.copy(),
        object_xy=global_scene.to_reference_frame(global_scene.object_xy),
        world_scale=global_scene.world_scale, seed=global_scene.seed,
    )


def scene_seed(base_seed: int, split: int, index: int) -> int:
    return int(np.random.SeedSequence((base_seed, split, index)).generate_state(1)[0])


def make_dataset(config: SceneConfig, n_scenes: int, base_seed: int = 0, split: int = 0,
                 prefix: str = "scene") -> list[Scene]:
    scenes = []
    for i in range(n_scenes):
        seed = scene_seed(base_seed, split, i)
        g, maps = generate_scene(replace(config, seed=seed), scene_id=f"{prefix}-{i:05d}")
        scenes.append(to_scene(g, maps))
    return scenes
