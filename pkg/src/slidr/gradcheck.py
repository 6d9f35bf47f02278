"""Finite-difference check of the analytic distillation gradients.

Builds a small random batch (two views, random descriptors, feature maps,
partitions and pairs) and compares every trainable parameter gradient of the
summed contrastive loss against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .correspondence import PairList
from .distill import LossConfig, SceneView, forward_backward, superpixel_anchors
from .model import PARAM_NAMES, HeadParams, ModelDims, init_params
from .superpixels import SuperpixelPartition, relabel_contiguous

REL_TOL = 1e-4


@dataclass
class GradCheckResult:
    seed: int
    errors: dict[str, float]
    loss: float
    anchors: int

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    def passed(self, tol: float = REL_TOL) -> bool:
        return self.worst < tol


def random_view(rng: np.random.Generator, dims: ModelDims, num_points: int = 24, cameras: int = 2,
                fm_shape: tuple[int, int] = (2, 3), segments: int = 4) -> SceneView:
    h, w = fm_shape
    H, W = 4 * h, 4 * w
    desc = rng.normal(0.0, 1.0, size=(num_points, 8))
    fmaps = [rng.normal(0.0, 1.0, size=(h, w, dims.E)) for _ in range(cameras)]
    parts = []
    for _ in range(cameras):
        # vertical stripes of random widths keep every segment 4-connected
        cuts = np.sort(rng.choice(np.arange(1, W), size=segments - 1, replace=False))
        cols = np.searchsorted(cuts, np.arange(W), side="right")
        parts.append(SuperpixelPartition(relabel_contiguous(np.tile(cols, (H, 1)))))
    triples = []
    for c in range(cameras):
        pts = rng.choice(num_points, size=num_points // 2, replace=False)
        pix = rng.choice(H * W, size=len(pts), replace=False) + 1
        triples += [(int(i), c, int(m)) for i, m in zip(pts, pix)]
    return SceneView(desc, fmaps, parts, PairList(np.array(triples, dtype=np.int64)))


def numeric_gradient(fn, params: HeadParams, name: str) -> np.ndarray:
    """Central differences with step 1e-6 * max(1, |p|)."""
    base = params.as_dict()
    arr = base[name]
    out = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        h = 1e-6 * max(1.0, abs(arr[idx]))
        vals = []
        for sign in (1.0, -1.0):
            bumped = arr.copy()
            bumped[idx] += sign * h
            vals.append(fn(HeadParams(**{**base, name: bumped})))
        out[idx] = (vals[0] - vals[1]) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(seed: int, dims: ModelDims = ModelDims(), cfg: LossConfig = LossConfig(),
                    names=PARAM_NAMES) -> GradCheckResult:
    rng = np.random.default_rng(seed)
    views = [random_view(rng, dims) for _ in range(2)]
    anchors = superpixel_anchors(views)
    params = init_params(dims, seed)
    # small random biases so the bias gradients are exercised away from zero
    for key in ("b1", "b2", "bp", "bi"):
        getattr(params, key)[:] = rng.normal(0.0, 0.1, size=getattr(params, key).shape)
    loss, grads = forward_backward(params, views, anchors, cfg)

    def fn(p):
        return forward_backward(p, views, anchors, cfg, need_grad=False)[0]

    errors = {name: relative_error(grads[name], numeric_gradient(fn, params, name)) for name in names}
    return GradCheckResult(seed, errors, float(loss), anchors.size)


def run_suite(seed: int, count: int = 3, dims: ModelDims = ModelDims(), cfg: LossConfig = LossConfig()):
    return [check_gradients(seed + k, dims, cfg) for k in range(count)]
