"""Train-and-evaluate experiments and one-axis ablation grids."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, nn
from .datagen import SceneConfig, make_dataset
from .errors import MapRegError, ValidationError
from .evaluation import FAIL_METRICS, FAIL_THRESHOLD, SceneMetrics, aggregate, evaluate_model
from .graph import MATCHING_MODES
from .losses import LossWeights
from .trainer import TrainConfig, prepare, train

log = logging.getLogger(__name__)

AXES = ("delta_xy", "phi", "n_objects", "loss_toggle")
LOSS_TOGGLES = {
    "full": LossWeights(1.0, 1.0, 1.0),
    "no_euclidean": LossWeights(0.0, 1.0, 1.0),
    "no_crossmap": LossWeights(1.0, 0.0, 1.0),
    "no_selfsim": LossWeights(1.0, 1.0, 0.0),
}
DEFAULT_SEEDS = (0, 1, 2)
METRIC_COLUMNS = ("cell", "seed", "scene_id", "mu_c", "mu_o", "failed")
TABLE_COLUMNS = ("cell", "failure_rate", "mu_o", "sigma_o", "mu_c", "sigma_c", "mu_o_all", "mu_c_all", "n_scenes")


@dataclass
class ExperimentConfig:
    """Data, training and evaluation settings of one train/evaluate run."""

    scene: SceneConfig = field(default_factory=SceneConfig)
    n_train: int = 1000
    n_val: int = 100
    n_test: int = 200
    data_seed: int = 0
    matching: str = "class_based"
    train: TrainConfig = field(default_factory=TrainConfig)
    threshold: float = FAIL_THRESHOLD
    fail_metric: str = "mu_o"

    def validate(self):
        self.scene.validate()
        self.train.validate()
        if self.n_train < 1 or self.n_val < 1:
            raise ValidationError("need at least one train and one validation scene")
        if self.n_test < 1:
            raise ValidationError("need at least one test scene")
        if self.matching not in MATCHING_MODES:
            raise ValidationError(f"matching must be one of {MATCHING_MODES}")
        if self.fail_metric not in FAIL_METRICS:
            raise ValidationError(f"fail_metric must be one of {FAIL_METRICS}")
        return self

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("n_train", "n_val", "n_test", "data_seed", "matching",
                                           "threshold", "fail_metric")}
        d["scene"] = asdict(self.scene)
        d["train"] = self.train.to_dict()
        return d


@dataclass
class AblationGrid:
    axis: str
    values: list
    base: ExperimentConfig = field(default_factory=ExperimentConfig)
    seeds: tuple = DEFAULT_SEEDS

    def validate(self):
        if self.axis not in AXES:
            raise ValidationError(f"axis must be one of {AXES}, got {self.axis!r}")
        if not self.values:
            raise ValidationError("ablation grid needs at least one value")
        if not self.seeds:
            raise ValidationError("ablation grid needs at least one seed")
        for v in self.values:
            if self.axis == "delta_xy" and not float(v) >= 0:
                raise ValidationError(f"delta_xy values must be >= 0, got {v}")
            if self.axis == "phi" and not 0 < float(v) <= 1:
                raise ValidationError(f"phi values must lie in (0, 1], got {v}")
            if self.axis == "loss_toggle" and v not in LOSS_TOGGLES:
                raise ValidationError(f"loss_toggle values must be among {sorted(LOSS_TOGGLES)}, got {v!r}")
        for v in self.values:
            self.cell_config(v).validate()
        return self

    def cell_label(self, value) -> str:
        return f"{self.axis}={value}"

    def cell_config(self, value) -> ExperimentConfig:
        b = self.base
        if self.axis == "delta_xy":
            return replace(b, scene=replace(b.scene, delta_xy=float(value)))
        if self.axis == "phi":
            return replace(b, scene=replace(b.scene, phi=float(value)))
        if self.axis == "n_objects":
            if int(value) != value:
                raise ValidationError(f"n_objects values must be integers, got {value}")
            return replace(b, scene=replace(b.scene, n_objects=int(value)))
        return replace(b, train=replace(b.train, loss_weights=LOSS_TOGGLES[value]))


@dataclass
class RunResult:
    seed: int
    scene_ids: list[str]
    metrics: list[SceneMetrics]
    best_epoch: int = -1
    error: str | None = None


def build_splits(exp: ExperimentConfig):
    """Prepared train/val/test samples; scene seeds depend on ``data_seed`` only."""
    sets = []
    for split, n in enumerate((exp.n_train, exp.n_val, exp.n_test)):
        scenes = make_dataset(exp.scene, n, base_seed=exp.data_seed, split=split,
                              prefix=("train", "val", "test")[split])
        sets.append([prepare(s, exp.matching) for s in scenes])
    return sets


def run_experiment(exp: ExperimentConfig, seeds: Sequence[int] = DEFAULT_SEEDS, splits=None) -> list[RunResult]:
    """Train one model per seed on shared data and evaluate it on the test split.

    A run that raises a library error counts every test scene as failed.
    """
    exp.validate()
    tr, va, te = splits if splits is not None else build_splits(exp)
    ids = [s.scene_id for s in te]
    out = []
    for seed in seeds:
        cfg = replace(exp.train, seed=int(seed))
        model = nn.init_model(cfg.arch, exp.scene.n_classes, cfg.width, seed=int(seed))
        try:
            best, report = train(model, tr, va, cfg)
            metrics = evaluate_model(best, te, exp.threshold, exp.fail_metric)
            out.append(RunResult(int(seed), ids, metrics, report.best_epoch))
        except MapRegError as exc:
            if isinstance(exc, ValidationError):
                raise
            log.warning("seed %d failed: %s", seed, exc)
            nan = float("nan")
            out.append(RunResult(int(seed), ids, [SceneMetrics(nan, nan, True)] * len(ids), error=str(exc)))
    return out


def summarize(runs: Sequence[RunResult]) -> dict:
    """Pooled aggregate over all seeds plus the spread of per-seed means."""
    pooled = aggregate([m for r in runs for m in r.metrics])
    per_seed = [aggregate(r.metrics) for r in runs]
    for key in ("mu_o", "mu_c"):
        vals = np.array([p[key] for p in per_seed])
        vals = vals[np.isfinite(vals)]
        pooled[f"{key}_seed_std"] = float(vals.std()) if len(vals) else float("nan")
    pooled["per_seed"] = [dict(seed=r.seed, **p) for r, p in zip(runs, per_seed)]
    return pooled


@dataclass
class AblationResult:
    grid: AblationGrid
    cells: list[str]
    runs: dict[str, list[RunResult]]
    summary: dict[str, dict]

    def rows(self):
        for cell in self.cells:
            for r in self.runs[cell]:
                for sid, m in zip(r.scene_ids, r.metrics):
                    yield cell, r.seed, sid, m.mu_c, m.mu_o, m.failed

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": out / "metrics.csv", "table": out / "table.csv", "report": out / "aggregate.json"}
        write_metrics_csv(paths["metrics"], self.rows())
        with open(paths["table"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for cell in self.cells:
                s = self.summary[cell]
                w.writerow([cell] + [_fmt(s[c]) for c in TABLE_COLUMNS[1:]])
        report = {
            "version": __version__, "axis": self.grid.axis, "values": list(self.grid.values),
            "seeds": list(self.grid.seeds), "base": self.grid.base.to_dict(),
            "cells": {c: _jsonable(self.summary[c]) for c in self.cells},
        }
        paths["report"].write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return paths


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if not np.isfinite(v) else repr(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for cell, seed, sid, mu_c, mu_o, failed in rows:
            w.writerow([cell, seed, sid, _fmt(mu_c), _fmt(mu_o), _fmt(bool(failed))])


def run_ablation(grid: AblationGrid) -> AblationResult:
    """Train and evaluate every cell of a one-axis grid, cells in the given order."""
    grid.validate()
    cells, runs, summary = [], {}, {}
    for value in grid.values:
        label = grid.cell_label(value)
        log.info("ablation cell %s", label)
        exp = grid.cell_config(value)
        runs[label] = run_experiment(exp, grid.seeds)
        summary[label] = summarize(runs[label])
        cells.append(label)
    return AblationResult(grid, cells, runs, summary)
