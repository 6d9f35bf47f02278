"""End-to-end desk-scale benchmark: generate scenes, segment, pretrain, probe."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig
from .distill import LossConfig, OptimizerConfig, PretrainResult, TrainScene, point_features, pretrain
from .evaluation import LinearClassifier, ProbeConfig, linear_probe, miou
from .model import HeadParams, ModelDims, init_params
from .scenegen import NUM_CLASSES, Scene, SceneSpec, generate_scene, observed_pairs
from .superpixels import felzenszwalb, fh_params_for, slic


@dataclass
class SegmentConfig:
    method: str = "slic"
    q: int = 150
    compactness: float = 10.0
    iters: int = 10
    fh_scale: float | None = None
    fh_sigma: float | None = None
    fh_min_size: int | None = None

    def __post_init__(self):
        if self.method not in ("slic", "fh"):
            raise ValueError("method must be 'slic' or 'fh'")
        if self.q < 1 or self.iters < 1:
            raise ValueError("q and iters must be >= 1")


@dataclass
class BenchmarkConfig:
    train_scenes: int = 8
    eval_scenes: int = 4


def segment(img, cfg: SegmentConfig, seed: int = 0):
    if cfg.method == "slic":
        return slic(img, cfg.q, cfg.compactness, cfg.iters, seed)
    params = fh_params_for(img.width, img.height)
    if cfg.fh_scale is not None:
        params["scale"] = cfg.fh_scale
    if cfg.fh_sigma is not None:
        params["sigma"] = cfg.fh_sigma
    if cfg.fh_min_size is not None:
        params["min_size"] = cfg.fh_min_size
    return felzenszwalb(img, **params)


def scene_seeds(seed: int, count: int, split: str) -> list[int]:
    base = {"train": 0, "eval": 500}[split]
    return [seed * 1000 + base + i for i in range(count)]


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def make_scenes(spec: SceneSpec, seeds: list[int], threads: int = 1) -> list[Scene]:
    return _map(lambda s: generate_scene(spec, s), seeds, threads)


def make_train_scenes(scenes: list[Scene], seeds: list[int], spec: SceneSpec, seg: SegmentConfig,
                      threads: int = 1) -> list[TrainScene]:
    def build(item):
        scene, s = item
        parts = [segment(img, seg, s) for img in scene.images]
        return TrainScene(scene.cloud, scene.images, parts, observed_pairs(scene, spec, s))
    return _map(build, list(zip(scenes, seeds)), threads)


@dataclass
class ProbeResult:
    classifier: LinearClassifier
    train_miou: float
    eval_miou: float
    eval_iou: np.ndarray
    history: list[dict] = field(default_factory=list)


def probe_features(params: HeadParams, train: list[Scene], evals: list[Scene], cfg: ProbeConfig,
                   seed: int = 0) -> ProbeResult:
    """Train a linear probe on frozen 3D features of ``train`` scenes, report mIoU on ``evals``."""
    Xtr = np.concatenate([point_features(params, s.cloud) for s in train])
    ytr = np.concatenate([s.cloud.labels for s in train])
    clf = linear_probe(Xtr, ytr, cfg, seed)
    _, train_m = miou(clf.predict(Xtr), ytr, cfg.num_classes)
    Xev = np.concatenate([point_features(params, s.cloud) for s in evals])
    yev = np.concatenate([s.cloud.labels for s in evals])
    iou, eval_m = miou(clf.predict(Xev), yev, cfg.num_classes)
    return ProbeResult(clf, train_m, eval_m, iou, clf.history)


@dataclass
class BenchmarkResult:
    pretrain: PretrainResult
    trained_probe: ProbeResult
    random_probe: ProbeResult


def run_benchmark(seed: int = 0, spec: SceneSpec = SceneSpec(), dims: ModelDims = ModelDims(),
                  loss_cfg: LossConfig = LossConfig(), opt: OptimizerConfig = OptimizerConfig(),
                  aug: AugmentConfig = AugmentConfig(), probe: ProbeConfig = ProbeConfig(),
                  seg: SegmentConfig = SegmentConfig(), bench: BenchmarkConfig = BenchmarkConfig(),
                  threads: int = 1) -> BenchmarkResult:
    train_seeds = scene_seeds(seed, bench.train_scenes, "train")
    eval_seeds = scene_seeds(seed, bench.eval_scenes, "eval")
    train = make_scenes(spec, train_seeds, threads)
    evals = make_scenes(spec, eval_seeds, threads)
    data = make_train_scenes(train, train_seeds, spec, seg, threads)
    result = pretrain(data, dims, loss_cfg, opt, aug, seed)
    probe = ProbeConfig(probe.lr, probe.epochs, NUM_CLASSES)
    trained = probe_features(result.params, train, evals, probe, seed)
    random = probe_features(init_params(dims, seed), train, evals, probe, seed)
    return BenchmarkResult(result, trained, random)
