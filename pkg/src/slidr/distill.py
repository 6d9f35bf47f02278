"""Superpixel-driven contrastive distillation from a frozen 2D encoder to a 3D network."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentationError, AugmentConfig, augment_image, augment_point_cloud
from .correspondence import PairList, SuperpointGroups, group_superpoints
from .geometry import PointCloud
from .model import (
    HeadParams, ModelDims, image_head, image_head_backward, init_params, normalized_descriptor,
    point_head, point_head_backward, toy_image_backbone, trainable_point_net, trunk_backward,
)
from .superpixels import Image, SuperpixelPartition

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


class DivergenceError(FloatingPointError):
    pass


@dataclass
class LossConfig:
    temperature: float = 0.07
    mode: str = "superpixel"  # or "pixel"
    pixel_samples: int = 4096

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.mode not in ("superpixel", "pixel"):
            raise ValueError("mode must be 'superpixel' or 'pixel'")
        if self.pixel_samples < 1:
            raise ValueError("pixel_samples must be >= 1")


@dataclass
class OptimizerConfig:
    lr0: float = 0.5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    dampening: float = 0.1
    epochs: int = 50
    batch_size: int = 4

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0 or not 0 <= self.dampening <= 1:
            raise ValueError("weight_decay must be >= 0 and dampening in [0, 1]")


@dataclass
class PooledPairs:
    f: np.ndarray
    g: np.ndarray
    provenance: list = field(default_factory=list)

    def __len__(self):
        return len(self.f)


# -- pooling ----------------------------------------------------------------------

def _segment_mean(values: np.ndarray, segment: np.ndarray, n: int):
    """Per-segment means; sums accumulate sequentially in member order."""
    counts = np.bincount(segment, minlength=n).astype(np.float64)
    sums = np.stack([np.bincount(segment, weights=values[:, k], minlength=n)
                     for k in range(values.shape[1])], axis=1)
    return sums / counts[:, None], counts


def pool_superpoint(features: np.ndarray, groups: dict[int, np.ndarray]):
    """Average head outputs over each superpoint of one camera.

    Returns ``(ids, pooled)`` with ``ids`` the superpixel ids in increasing order.
    """
    ids = sorted(groups)
    members, segment = [], []
    for a, s in enumerate(ids):
        idx = np.asarray(groups[s], dtype=np.int64)
        if len(idx) == 0:
            raise ValueError(f"superpoint {s} is empty")
        members.append(np.sort(idx))
        segment.append(np.full(len(idx), a))
    if not ids:
        return np.zeros(0, np.int64), np.zeros((0, features.shape[1]))
    members = np.concatenate(members)
    pooled, _ = _segment_mean(features[members], np.concatenate(segment), len(ids))
    return np.asarray(ids, dtype=np.int64), pooled


def pool_superpixel(emb: np.ndarray, part: SuperpixelPartition, keep):
    """Average pixel embeddings over the kept superpixels; returns ``(ids, pooled)``."""
    keep = np.array(sorted(int(s) for s in keep), dtype=np.int64)
    F = emb.shape[-1]
    if len(keep) == 0:
        return keep, np.zeros((0, F))
    if keep.min() < 0 or keep.max() >= part.count:
        raise ValueError("keep refers to unknown superpixel ids")
    slot = np.full(part.count, -1, dtype=np.int64)
    slot[keep] = np.arange(len(keep))
    lab = slot[part.labels.ravel()]
    sel = np.flatnonzero(lab >= 0)
    pooled, _ = _segment_mean(emb.reshape(-1, F)[sel], lab[sel], len(keep))
    return keep, pooled


# -- loss ---------------------------------------------------------------------------

def _check_norms(*arrays):
    for arr in arrays:
        if np.any(np.linalg.norm(arr, axis=1) > 1.0 + UNIT_TOL):
            raise ValueError("contrastive inputs must have norm <= 1 (unit or pooled unit vectors)")


def contrastive_loss_and_grad(f: np.ndarray, g: np.ndarray, temperature: float, need_grad=True):
    """Summed InfoNCE over anchors ``f_k`` with all ``g`` of the batch as candidates."""
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if len(f) < 1 or f.shape != g.shape:
        raise ValueError("need K >= 1 matching pairs")
    _check_norms(f, g)
    logits = (f @ g.T) / temperature
    top = logits.max(axis=1, keepdims=True)
    shifted = logits - top
    expo = np.exp(shifted)
    denom = expo.sum(axis=1)
    per_anchor = np.log(denom) - np.diagonal(shifted)
    loss = float(per_anchor.sum())
    if not need_grad:
        return loss, None, None
    d_logits = expo / denom[:, None]
    d_logits[np.diag_indices_from(d_logits)] -= 1.0
    d_logits /= temperature
    return loss, d_logits @ g, d_logits.T @ f


def contrastive_loss(pairs, cfg: LossConfig = LossConfig()) -> float:
    if isinstance(pairs, PooledPairs):
        f, g = pairs.f, pairs.g
    else:
        f, g = pairs
    return contrastive_loss_and_grad(f, g, cfg.temperature, need_grad=False)[0]


def naive_contrastive_loss(f, g, temperature):
    """Straight double loop over anchors and candidates; used as a reference."""
    total = 0.0
    for k in range(len(f)):
        num = np.exp(np.dot(f[k], g[k]) / temperature)
        den = 0.0
        for j in range(len(g)):
            den += np.exp(np.dot(f[k], g[j]) / temperature)
        total -= np.log(num / den)
    return total


# -- batches ------------------------------------------------------------------------

@dataclass
class SceneView:
    """One (augmented) scene ready for the forward pass."""

    descriptors: np.ndarray
    feature_maps: list[np.ndarray]
    partitions: list[SuperpixelPartition]
    pairs: PairList

    @property
    def num_points(self):
        return len(self.descriptors)


@dataclass
class AnchorIndex:
    """Which points and pixels average into each anchor of the batch."""

    point_members: np.ndarray
    point_segment: np.ndarray
    pixel_members: list[tuple[int, int, np.ndarray, np.ndarray]]  # (view, camera, flat pixels, segment)
    provenance: list[tuple]

    @property
    def size(self):
        return len(self.provenance)


def superpixel_anchors(views: list[SceneView]) -> AnchorIndex:
    pm_members, pm_seg, px, prov = [], [], [], []
    offset = 0
    for v, view in enumerate(views):
        sizes = [(p.width, p.height) for p in view.partitions]
        pm = view.pairs.to_pixel_map(view.num_points, sizes)
        groups = group_superpoints(pm, view.partitions)
        for c, cam_groups in enumerate(groups.groups):
            ids = sorted(cam_groups)
            if not ids:
                continue
            first = len(prov)
            slot = np.full(view.partitions[c].count, -1, dtype=np.int64)
            for a, s in enumerate(ids):
                idx = cam_groups[s]
                pm_members.append(idx + offset)
                pm_seg.append(np.full(len(idx), first + a))
                slot[s] = first + a
                prov.append((v, c, s))
            lab = slot[view.partitions[c].labels.ravel()]
            sel = np.flatnonzero(lab >= 0)
            px.append((v, c, sel, lab[sel]))
        offset += view.num_points
    if not prov:
        raise ValueError("batch has no non-empty superpoint")
    return AnchorIndex(np.concatenate(pm_members), np.concatenate(pm_seg), px, prov)


def pixel_anchors(views: list[SceneView], sample_size: int, rng: np.random.Generator) -> AnchorIndex:
    rows = []
    offset = 0
    for v, view in enumerate(views):
        t = view.pairs.triples
        rows.append(np.stack([np.full(len(t), v), t[:, 0] + offset, t[:, 1], t[:, 2] - 1], axis=1))
        offset += view.num_points
    allp = np.concatenate(rows)
    if len(allp) == 0:
        raise ValueError("batch has no point-pixel pairs")
    if sample_size < len(allp):
        allp = allp[np.sort(rng.choice(len(allp), size=sample_size, replace=False))]
    K = len(allp)
    px = []
    for v in range(len(views)):
        for c in range(len(views[v].partitions)):
            sel = np.flatnonzero((allp[:, 0] == v) & (allp[:, 2] == c))
            if len(sel):
                px.append((v, c, allp[sel, 3], sel))
    prov = [tuple(int(x) for x in row) for row in allp]
    return AnchorIndex(allp[:, 1], np.arange(K), px, prov)


def build_anchors(views, cfg: LossConfig, rng=None) -> AnchorIndex:
    if cfg.mode == "superpixel":
        return superpixel_anchors(views)
    return pixel_anchors(views, cfg.pixel_samples, rng if rng is not None else np.random.default_rng(0))


# -- forward / backward ---------------------------------------------------------------

def forward_backward(params: HeadParams, views: list[SceneView], anchors: AnchorIndex,
                     cfg: LossConfig, need_grad: bool = True, grad_scale: float = 1.0):
    """Summed loss over the batch and, optionally, ``grad_scale`` times its parameter gradients."""
    K = anchors.size
    X = np.concatenate([v.descriptors for v in views])
    pf, trunk_cache = trainable_point_net(X, params, return_cache=True)
    emb, head_cache = point_head(pf, params, return_cache=True)
    F = emb.shape[1]

    f, f_counts = _segment_mean(emb[anchors.point_members], anchors.point_segment, K)
    g = np.zeros((K, F))
    g_counts = np.zeros(K)
    image_caches = []
    for v, c, pix, seg in anchors.pixel_members:
        out, cache = image_head(views[v].feature_maps[c], params, return_cache=True)
        flat = out.reshape(-1, F)
        sums = np.stack([np.bincount(seg, weights=flat[pix, k], minlength=K) for k in range(F)], 1)
        g += sums
        g_counts += np.bincount(seg, minlength=K)
        image_caches.append((out.shape, pix, seg, cache))
    g /= g_counts[:, None]

    loss, d_f, d_g = contrastive_loss_and_grad(f, g, cfg.temperature, need_grad=need_grad)
    if not np.isfinite(loss):
        raise DivergenceError("divergence: non-finite loss")
    if not need_grad:
        return loss, None
    d_f *= grad_scale
    d_g *= grad_scale

    d_emb = np.zeros_like(emb)
    np.add.at(d_emb, anchors.point_members, (d_f / f_counts[:, None])[anchors.point_segment])
    d_pf, grads = point_head_backward(d_emb, head_cache, params)
    grads.update(trunk_backward(d_pf, trunk_cache, params))

    grads["Wi"] = np.zeros_like(params.Wi)
    grads["bi"] = np.zeros_like(params.bi)
    d_g_mean = d_g / g_counts[:, None]
    for shape, pix, seg, cache in image_caches:
        d_out = np.zeros((shape[0] * shape[1], F))
        np.add.at(d_out, pix, d_g_mean[seg])
        ig = image_head_backward(d_out.reshape(shape), cache, params)
        grads["Wi"] += ig["Wi"]
        grads["bi"] += ig["bi"]
    return loss, grads


def batch_loss(params, views, anchors, cfg: LossConfig) -> float:
    return forward_backward(params, views, anchors, cfg, need_grad=False)[0]


def pixel_mode_loss(point_emb: np.ndarray, pixel_emb: list[np.ndarray], pairs: PairList,
                    cfg: LossConfig, rng: np.random.Generator | None = None) -> float:
    """Point-pixel contrastive loss on a uniform subsample of the pairs (no superpixels)."""
    if len(pairs) == 0:
        raise ValueError("pixel-mode loss needs at least one pair")
    t = pairs.triples
    if cfg.pixel_samples < len(t):
        rng = rng if rng is not None else np.random.default_rng(0)
        t = t[np.sort(rng.choice(len(t), size=cfg.pixel_samples, replace=False))]
    f = point_emb[t[:, 0]]
    g = np.stack([pixel_emb[c].reshape(-1, pixel_emb[c].shape[-1])[m - 1] for _, c, m in t])
    return contrastive_loss((f, g), cfg)


# -- optimisation -------------------------------------------------------------------

def cosine_lr(t: float, total: float, lr0: float) -> float:
    if not 0 <= t <= total:
        raise ValueError("epoch outside [0, T]")
    return lr0 * (1.0 + np.cos(np.pi * t / total)) / 2.0


def sgd_step(params: dict, grads: dict, velocity: dict | None, cfg: OptimizerConfig, lr: float):
    """SGD with momentum, dampening and L2 weight decay.

    The first call (``velocity is None``) seeds the buffer with the decayed
    gradient itself, without dampening.
    """
    new_params, new_vel = {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("divergence: non-finite gradient")
        g = g + cfg.weight_decay * p
        if velocity is None:
            v = g
        else:
            v = cfg.momentum * velocity[name] + (1.0 - cfg.dampening) * g
        new_vel[name] = v
        new_params[name] = p - lr * v
    return new_params, new_vel


# -- pretraining --------------------------------------------------------------------

@dataclass
class TrainScene:
    cloud: PointCloud
    images: list[Image]
    partitions: list[SuperpixelPartition]
    pairs: PairList


@dataclass
class PretrainResult:
    params: HeadParams
    history: list[dict]


def augment_scene(scene: TrainScene, aug: AugmentConfig, rng: np.random.Generator):
    """Augment the cloud, then every camera image, with the surviving pairs.

    A camera whose crop cannot keep enough pairs sends the whole scene back to a
    fresh point-cloud draw; after ``max_resample_attempts`` the error propagates.
    """
    for attempt in range(aug.max_resample_attempts):
        ac = augment_point_cloud(scene.cloud, scene.pairs, aug, rng)
        try:
            images = [augment_image(img, part, ac.pairs.for_camera(c), aug, rng)
                      for c, (img, part) in enumerate(zip(scene.images, scene.partitions))]
        except AugmentationError:
            if attempt + 1 == aug.max_resample_attempts:
                raise
            continue
        return ac, images
    raise AugmentationError("cannot satisfy pair constraint")


def make_view(scene: TrainScene, aug: AugmentConfig | None, rng, E: int) -> SceneView:
    if aug is None:
        cloud = scene.cloud
        images, parts = scene.images, scene.partitions
        cam_pairs = [scene.pairs.for_camera(c) for c in range(len(scene.images))]
    else:
        ac, augmented = augment_scene(scene, aug, rng)
        cloud = ac.cloud
        images = [a.image for a in augmented]
        parts = [a.partition for a in augmented]
        cam_pairs = [a.pairs for a in augmented]
    return SceneView(
        descriptors=normalized_descriptor(cloud),
        feature_maps=[toy_image_backbone(img, E) for img in images],
        partitions=list(parts),
        pairs=PairList.concat(cam_pairs),
    )


def pretrain(scenes: list[TrainScene], dims: ModelDims = ModelDims(), loss_cfg: LossConfig = LossConfig(),
             opt: OptimizerConfig = OptimizerConfig(), aug: AugmentConfig | None = AugmentConfig(),
             seed: int = 0, init: HeadParams | None = None) -> PretrainResult:
    """Epoch loop: shuffle, augment, pool, contrast across the batch, SGD step.

    The optimised objective is the per-anchor mean of the summed batch loss;
    history entries log that mean averaged over the epoch's batches.
    """
    if not scenes:
        raise ValueError("pretraining needs at least one scene")
    rng = np.random.default_rng(seed)
    params = init.copy() if init is not None else init_params(dims, seed)
    state = params.as_dict()
    velocity = None
    history = []
    for epoch in range(opt.epochs):
        lr = cosine_lr(epoch, opt.epochs, opt.lr0)
        order = rng.permutation(len(scenes))
        losses, anchors_seen = [], 0
        for start in range(0, len(order), opt.batch_size):
            batch = [scenes[i] for i in order[start:start + opt.batch_size]]
            views = [make_view(s, aug, rng, dims.E) for s in batch]
            anchors = build_anchors(views, loss_cfg, rng)
            K = anchors.size
            loss, grads = forward_backward(HeadParams(**state), views, anchors, loss_cfg,
                                           grad_scale=1.0 / K)
            state, velocity = sgd_step(state, grads, velocity, opt, lr)
            losses.append(loss / K)
            anchors_seen += K
        history.append({"epoch": epoch, "lr": float(lr), "mean_loss": float(np.mean(losses)),
                        "pair_count": anchors_seen})
        log.info("epoch %d lr %.4f loss %.4f pairs %d", epoch, lr, history[-1]["mean_loss"], anchors_seen)
    return PretrainResult(HeadParams(**state), history)


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "mean_loss", "pair_count"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["lr"])), repr(float(row["mean_loss"])), row["pair_count"]])


def point_features(params: HeadParams, cloud: PointCloud) -> np.ndarray:
    """Frozen 3D backbone output for an un-augmented cloud."""
    return trainable_point_net(normalized_descriptor(cloud), params)


def groups_for(view: SceneView) -> SuperpointGroups:
    sizes = [(p.width, p.height) for p in view.partitions]
    return group_superpoints(view.pairs.to_pixel_map(view.num_points, sizes), view.partitions)
