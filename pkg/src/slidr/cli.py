"""Command-line front end: ``slidr <command> [--config F] [--seed N] [--out DIR] [--threads N] [--set k.p=v]``.

Commands
    gen        write the benchmark scenes (train and eval) as scene directories
    segment    write superpixel partitions of every camera image (16-bit PGM)
    pretrain   distill, write ``checkpoint.bin`` (+ sidecar) and ``loss.csv``
    probe      linear probe on frozen features of a checkpoint, ``probe_metrics.csv``
    simmap     cosine similarity maps of one query point against pixels and points
    gradcheck  finite-difference check of every trainable gradient

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig
from .distill import LossConfig, OptimizerConfig, point_features, pretrain, write_history
from .evaluation import ProbeConfig, similarity_map, write_probe_metrics
from .gradcheck import REL_TOL, run_suite
from .model import (
    ModelDims, image_head, load_params, point_head, save_params, toy_image_backbone,
)
from .pipeline import (
    BenchmarkConfig, SegmentConfig, make_scenes, make_train_scenes, probe_features, scene_seeds, segment,
)
from .scenegen import VEHICLE, SceneSpec, write_scene
from .superpixels import write_pgm16

log = logging.getLogger("slidr")

COMMANDS = ("gen", "segment", "pretrain", "probe", "simmap", "gradcheck")
CHECKPOINT = "checkpoint.bin"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    dims: ModelDims = field(default_factory=ModelDims)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    seed: int = 0
    threads: int = 1
    out: str = "out"
    checkpoint: str | None = None  # defaults to <out>/checkpoint.bin
    query_point: int | None = None  # simmap query; defaults to the first vehicle point

    def __post_init__(self):
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.query_point is not None and self.query_point < 0:
            raise ValueError("query_point must be >= 0")

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / CHECKPOINT


# -- config loading -------------------------------------------------------------

def _coerce(value, default, path: str):
    """Check a JSON value against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float)
                                                                      and value.is_integer())):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{path}: expected a number, string or null, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(v, d, f"{path}[{k}]") for k, (v, d) in enumerate(zip(value, default)))
    return value


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a JSON object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key {where}{unknown[0]}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, sub)
        elif value is None and default is None:
            kwargs[key] = None
        else:
            kwargs[key] = _coerce(value, default, sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        # find the offending field by validating it alone against the defaults
        for key, value in kwargs.items():
            try:
                cls(**{key: value})
            except (ValueError, TypeError):
                sub = f"{path}.{key}" if path else key
                raise ConfigError(f"{sub}: {exc}") from None
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def config_to_dict(cfg: RunConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)


def apply_override(data: dict, assignment: str) -> None:
    """Apply one ``key.path=value`` override; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {assignment!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {part} is not a section")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), **top) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: top level must be a JSON object")
    for item in overrides:
        apply_override(data, item)
    for key, value in top.items():
        if value is not None:
            data[key] = value
    return config_from_dict(data)


# -- commands -------------------------------------------------------------------

def _splits(cfg: RunConfig):
    return {"train": scene_seeds(cfg.seed, cfg.benchmark.train_scenes, "train"),
            "eval": scene_seeds(cfg.seed, cfg.benchmark.eval_scenes, "eval")}


def cmd_gen(cfg: RunConfig, out: Path) -> int:
    for split, seeds in _splits(cfg).items():
        for k, scene in enumerate(make_scenes(cfg.scene, seeds, cfg.threads)):
            write_scene(out / "scenes" / f"{split}_{k:03d}", scene)
    return 0


def cmd_segment(cfg: RunConfig, out: Path) -> int:
    for split, seeds in _splits(cfg).items():
        for k, (scene, s) in enumerate(zip(make_scenes(cfg.scene, seeds, cfg.threads), seeds)):
            d = out / "segments" / f"{split}_{k:03d}"
            d.mkdir(parents=True, exist_ok=True)
            for c, img in enumerate(scene.images):
                write_pgm16(d / f"seg_{c}.pgm", segment(img, cfg.segment, s).labels)
    return 0


def cmd_pretrain(cfg: RunConfig, out: Path) -> int:
    seeds = _splits(cfg)["train"]
    scenes = make_scenes(cfg.scene, seeds, cfg.threads)
    data = make_train_scenes(scenes, seeds, cfg.scene, cfg.segment, cfg.threads)
    result = pretrain(data, cfg.dims, cfg.loss, cfg.optimizer, cfg.augment, cfg.seed)
    ckpt = cfg.checkpoint_path()
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    # paths stay out of the sidecar so the artefact does not depend on where it was written
    run = {k: v for k, v in config_to_dict(cfg).items() if k not in ("out", "checkpoint")}
    save_params(ckpt, result.params, {"seed": cfg.seed, "config": run})
    write_history(out / "loss.csv", result.history)
    first, last = result.history[0]["mean_loss"], result.history[-1]["mean_loss"]
    print(f"pretrain: mean loss {first:.4f} -> {last:.4f}, checkpoint {ckpt}")
    return 0


def _load_checkpoint(cfg: RunConfig):
    ckpt = cfg.checkpoint_path()
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt} (run pretrain first)")
    params = load_params(ckpt)
    if params.dims != cfg.dims:
        raise ValueError(f"checkpoint dims {params.dims} do not match config dims {cfg.dims}")
    return params


def cmd_probe(cfg: RunConfig, out: Path) -> int:
    params = _load_checkpoint(cfg)
    splits = _splits(cfg)
    train = make_scenes(cfg.scene, splits["train"], cfg.threads)
    evals = make_scenes(cfg.scene, splits["eval"], cfg.threads)
    res = probe_features(params, train, evals, cfg.probe, cfg.seed)
    write_probe_metrics(out / "probe_metrics.csv", res.history)
    summary = {"train_miou": res.train_miou, "eval_miou": res.eval_miou,
               "eval_iou": [None if np.isnan(v) else float(v) for v in res.eval_iou]}
    (out / "probe_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"probe: train mIoU {res.train_miou:.4f}, eval mIoU {res.eval_miou:.4f}")
    return 0


def cmd_simmap(cfg: RunConfig, out: Path) -> int:
    params = _load_checkpoint(cfg)
    scene = make_scenes(cfg.scene, _splits(cfg)["eval"][:1])[0]
    emb = point_head(point_features(params, scene.cloud), params)
    q = cfg.query_point
    if q is None:
        vehicles = np.flatnonzero(scene.cloud.labels == VEHICLE)
        q = int(vehicles[0]) if len(vehicles) else 0
    if q >= len(emb):
        raise ValueError(f"query_point {q} out of range for {len(emb)} points")
    sims = similarity_map(emb[q], emb)
    with open(out / "simmap_points.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "label", "similarity"])
        for i, (lab, s) in enumerate(zip(scene.cloud.labels, sims)):
            w.writerow([i, int(lab), repr(float(s))])
    for c, img in enumerate(scene.images):
        pix = similarity_map(emb[q], image_head(toy_image_backbone(img, cfg.dims.E), params))
        write_pgm16(out / f"simmap_cam_{c}.pgm", np.round((pix + 1.0) / 2.0 * 65535).astype(np.int64))
    print(f"simmap: query point {q}")
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    results = run_suite(cfg.seed, 3, cfg.dims, cfg.loss)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "param", "rel_error"])
        for r in results:
            for name, err in r.errors.items():
                w.writerow([r.seed, name, repr(err)])
    worst = max(r.worst for r in results)
    ok = worst < REL_TOL
    print(f"gradcheck: {len(results)} seeds, worst relative error {worst:.3e} ({'ok' if ok else 'FAILED'})")
    return 0 if ok else 1


HANDLERS = {"gen": cmd_gen, "segment": cmd_segment, "pretrain": cmd_pretrain, "probe": cmd_probe,
            "simmap": cmd_simmap, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slidr", description="Superpixel-driven image-to-Lidar distillation")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (created if missing)")
    p.add_argument("--threads", type=int)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE",
                   help="override one config field, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, out=args.out, threads=args.threads)
    except ConfigError as exc:
        print(f"slidr: config error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(dump_config(cfg) + "\n")
        return HANDLERS[args.command](cfg, out)
    except Exception as exc:  # noqa: BLE001 - every pipeline failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"slidr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
