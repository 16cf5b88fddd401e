"""Command-line interface: ``mapreg {generate,ingest,train,evaluate,ablate,baseline}``.

Every command resolves its configuration from built-in defaults, an optional
JSON/YAML file (``--config``) and flag overrides, and writes the resolved tree
to ``<out>/config.resolved.json`` before doing any work.

Exit codes: 0 success, 2 configuration or validation error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__, nn
from .ablation import AblationGrid, ExperimentConfig, run_ablation, write_metrics_csv
from .baseline import baseline_solve
from .datagen import SceneConfig, make_dataset
from .errors import MapRegError, ValidationError
from .evaluation import SceneMetrics, aggregate, evaluate_model, evaluate_scene
from .ingest import ingest_scene
from .losses import LossWeights
from .sceneio import read_dataset, write_dataset
from .trainer import REAL_WEIGHT_DECAY, SYNTHETIC_WEIGHT_DECAY, TrainConfig, prepare, train

log = logging.getLogger("mapreg")

_scene_defaults = asdict(SceneConfig())
_scene_defaults.pop("seed")
_train_defaults = TrainConfig().to_dict()
_train_defaults.pop("seed")
_train_defaults["weight_decay"] = None  # chosen from the dataset source unless set

DEFAULTS = {
    "seed": 0,
    "matching": "class_based",
    "scene": _scene_defaults,
    "data": {"n_train": 2000, "n_val": 500, "n_test": 500},
    "train": _train_defaults,
    "eval": {"threshold": 7.5, "fail_metric": "mu_o"},
    "ablation": {"axis": "delta_xy", "values": [0.0, 2.5, 5.0, 7.5], "seeds": [0, 1, 2],
                 "n_train": 1000, "n_val": 100, "n_test": 200},
    "baseline": {"iterations": 50},
    "ingest": {"vocabulary": None, "split": "all"},
}


def version_stamp() -> str:
    """Package version, with ``git describe`` appended when run from a checkout."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        desc = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix.lower() in (".yaml", ".yml"):
            import yaml
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except Exception as exc:  # parser errors differ between formats
        raise ValidationError(f"{path}: cannot parse config ({exc})") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    return data


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge that rejects keys the defaults do not know."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ValidationError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where}{key} must be a mapping")
            out[key] = merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _parse_set(items) -> dict:
    tree: dict = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = tree
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return tree


def resolve_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        cfg = merge(cfg, load_config_file(args.config))
    flags: dict = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if getattr(args, "arch", None) is not None:
        flags.setdefault("train", {})["arch"] = args.arch
    if getattr(args, "max_epochs", None) is not None:
        flags.setdefault("train", {})["max_epochs"] = args.max_epochs
    if getattr(args, "matching", None) is not None:
        flags["matching"] = args.matching
    cfg = merge(cfg, flags)
    cfg = merge(cfg, _parse_set(args.set))
    return cfg


def scene_config(cfg) -> SceneConfig:
    try:
        return SceneConfig(**cfg["scene"], seed=int(cfg["seed"])).validate()
    except TypeError as exc:
        raise ValidationError(f"bad scene config: {exc}") from None


def train_config(cfg, weight_decay_default=SYNTHETIC_WEIGHT_DECAY) -> TrainConfig:
    t = dict(cfg["train"])
    if t.get("weight_decay") is None:
        t["weight_decay"] = weight_decay_default
    try:
        t["loss_weights"] = LossWeights(**t["loss_weights"])
        return TrainConfig(**t, seed=int(cfg["seed"])).validate()
    except TypeError as exc:
        raise ValidationError(f"bad train config: {exc}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise MapRegError(f"cannot create output directory {out}: {exc}") from None
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _require(path, what) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"{what} not found: {p}")
    return p


def _manifest(data_dir: Path) -> dict:
    path = _require(data_dir, "dataset") / "manifest.json"
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}


# commands -------------------------------------------------------------------

def cmd_generate(args, cfg, out: Path) -> dict:
    sc = scene_config(cfg)
    data = cfg["data"]
    splits = {}
    for split, (name, n) in enumerate((("train", data["n_train"]), ("val", data["n_val"]), ("test", data["n_test"]))):
        if int(n) < 0:
            raise ValidationError(f"data.n_{name} must be >= 0")
        splits[name] = make_dataset(sc, int(n), base_seed=int(cfg["seed"]), split=split, prefix=name)
    write_dataset(out, splits, {"source": "synthetic", "version": version_stamp(), "config": cfg})
    return {k: len(v) for k, v in splits.items()}


def cmd_ingest(args, cfg, out: Path) -> dict:
    vocab = args.classes.split(",") if args.classes else cfg["ingest"]["vocabulary"]
    if not vocab:
        raise ValidationError("ingest needs a class vocabulary (--classes or ingest.vocabulary)")
    files = []
    for inp in args.inputs:
        p = _require(inp, "detection file")
        files.extend(sorted(p.glob("*.json")) if p.is_dir() else [p])
    if not files:
        raise ValidationError("no detection files to ingest")
    scenes = [ingest_scene(f, vocab, scene_id=None) for f in files]
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        for s, f in zip(scenes, files):
            s.scene_id = f.stem
    write_dataset(out, {cfg["ingest"]["split"]: scenes},
                  {"source": "ingested", "version": version_stamp(), "vocabulary": list(vocab), "config": cfg})
    return {"scenes": len(scenes), "maps": sum(len(s.maps) for s in scenes)}


def _samples(data_dir, split, matching):
    scenes = read_dataset(_require(data_dir, "dataset"), split)
    return scenes, [prepare(s, matching) for s in scenes]


def cmd_train(args, cfg, out: Path) -> dict:
    data_dir = _require(args.data, "dataset")
    source = _manifest(data_dir).get("config", {}).get("source", "synthetic")
    tc = train_config(cfg, REAL_WEIGHT_DECAY if source == "ingested" else SYNTHETIC_WEIGHT_DECAY)
    scenes, tr = _samples(data_dir, args.train_split, cfg["matching"])
    _, va = _samples(data_dir, args.val_split, cfg["matching"])
    n_classes = max(s.n_classes for s in scenes)
    model = nn.init_model(tc.arch, n_classes, tc.width, seed=tc.seed)
    best, report = train(model, tr, va, tc)
    nn.save_checkpoint(best, out / "model.npz")
    report.write_csv(out / "train_log.csv")
    log.info("trained %d epochs in %.1f s", len(report.history), report.wall_clock)
    summary = {"best_epoch": report.best_epoch, "best_val": report.best_val,
               "epochs": len(report.history), "stop_reason": report.stop_reason,
               "weight_decay": tc.weight_decay}
    _dump(out / "report.json", {"version": version_stamp(), "config": cfg, "train": summary})
    return summary


def _write_eval(out: Path, cfg, label, seed, scene_ids, metrics) -> dict:
    write_metrics_csv(out / "metrics.csv",
                      ((label, seed, sid, m.mu_c, m.mu_o, m.failed) for sid, m in zip(scene_ids, metrics)))
    agg = aggregate(metrics)
    agg = {k: (None if isinstance(v, float) and v != v else v) for k, v in agg.items()}
    _dump(out / "aggregate.json", {"version": version_stamp(), "config": cfg, "aggregate": agg})
    return agg


def cmd_evaluate(args, cfg, out: Path) -> dict:
    ckpt = _require(args.checkpoint, "checkpoint")
    model = nn.load_checkpoint(ckpt)
    _, te = _samples(args.data, args.split, cfg["matching"])
    metrics = evaluate_model(model, te, float(cfg["eval"]["threshold"]), cfg["eval"]["fail_metric"])
    return _write_eval(out, cfg, "evaluate", int(cfg["seed"]), [s.scene_id for s in te], metrics)


def cmd_baseline(args, cfg, out: Path) -> dict:
    scenes = read_dataset(_require(args.data, "dataset"), args.split)
    metrics = []
    for s in scenes:
        try:
            res = baseline_solve(s.maps, cfg["matching"], int(cfg["baseline"]["iterations"]))
            smp = prepare(s, cfg["matching"])
            metrics.append(evaluate_scene(res.node_predictions(), smp.sup, smp.graph,
                                          float(cfg["eval"]["threshold"]), cfg["eval"]["fail_metric"]))
        except MapRegError as exc:
            if isinstance(exc, ValidationError):
                raise
            log.warning("scene %s: %s", s.scene_id, exc)
            metrics.append(SceneMetrics(float("nan"), float("nan"), True))
    return _write_eval(out, cfg, "baseline", int(cfg["seed"]), [s.scene_id for s in scenes], metrics)


def ablation_grid(cfg) -> AblationGrid:
    a = cfg["ablation"]
    base = ExperimentConfig(
        scene=scene_config(cfg), n_train=int(a["n_train"]), n_val=int(a["n_val"]), n_test=int(a["n_test"]),
        data_seed=int(cfg["seed"]), matching=cfg["matching"], train=train_config(cfg),
        threshold=float(cfg["eval"]["threshold"]), fail_metric=cfg["eval"]["fail_metric"],
    )
    values = a["values"] if isinstance(a["values"], list) else [a["values"]]
    return AblationGrid(axis=a["axis"], values=values, base=base, seeds=tuple(int(s) for s in a["seeds"]))


def cmd_ablate(args, cfg, out: Path) -> dict:
    grid = ablation_grid(cfg).validate()
    result = run_ablation(grid)
    result.write(out)
    rep = json.loads((out / "aggregate.json").read_text(encoding="utf-8"))
    rep["version"] = version_stamp()
    rep["config"] = cfg
    _dump(out / "aggregate.json", rep)
    return {c: {"failure_rate": result.summary[c]["failure_rate"], "mu_o": result.summary[c]["mu_o"]}
            for c in result.cells}


COMMANDS = {
    "generate": cmd_generate, "ingest": cmd_ingest, "train": cmd_train,
    "evaluate": cmd_evaluate, "ablate": cmd_ablate, "baseline": cmd_baseline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML config file")
    common.add_argument("--seed", type=int, help="data seed (generate, ablate) or training seed (train)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.lr=0.05")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="mapreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write synthetic train/val/test scenes")

    s = sub.add_parser("ingest", parents=[common], help="build scenes from raw detection files")
    s.add_argument("inputs", nargs="+", help="detection JSON files or directories of them")
    s.add_argument("--classes", help="comma-separated class vocabulary")

    for name, helptext in (("train", "train a model"), ("evaluate", "evaluate a checkpoint"),
                           ("ablate", "run an ablation grid"), ("baseline", "run the classical baseline")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--arch", help="gcn or gat")
        s.add_argument("--matching", help="class_based or gt_matches")
        s.add_argument("--max-epochs", type=int)
        if name != "ablate":
            s.add_argument("--data", required=True, help="dataset directory")
        if name == "train":
            s.add_argument("--train-split", default="train")
            s.add_argument("--val-split", default="val")
        if name in ("evaluate", "baseline"):
            s.add_argument("--split", default="test")
        if name == "evaluate":
            s.add_argument("--checkpoint", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = _out_dir(args)
        _dump(out / "config.resolved.json", {"command": args.command, "version": version_stamp(), "config": cfg})
        summary = COMMANDS[args.command](args, cfg, out)
    except ValidationError as exc:
        print(f"mapreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (MapRegError, OSError) as exc:
        print(f"mapreg {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
