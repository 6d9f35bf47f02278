"""Correspondence-preserving augmentations for point clouds and images.

Every random draw is recorded in a transform record so that the augmentation
can be replayed exactly from the original inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import PairList
from .geometry import PointCloud
from .resample import interp_matrix, resample
from .superpixels import Image, SuperpixelPartition, relabel_contiguous


class AugmentationError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    rotate_z: bool = True
    flip_x_prob: float = 0.5
    flip_y_prob: float = 0.5
    cuboid_max_frac: float = 0.10
    min_pairs: int = 1024
    crop_min_area_frac: float = 0.30
    crop_aspect_range: tuple[float, float] = (14 / 9, 17 / 9)
    out_width: int = 416
    out_height: int = 224
    image_min_pairs: int = 1024
    image_min_frac: float = 0.75
    hflip_prob: float = 0.5
    max_resample_attempts: int = 200

    def __post_init__(self):
        self.crop_aspect_range = tuple(float(v) for v in self.crop_aspect_range)
        for name in ("flip_x_prob", "flip_y_prob", "hflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        for name in ("cuboid_max_frac", "crop_min_area_frac", "image_min_frac"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        lo, hi = self.crop_aspect_range
        if not 0 < lo <= hi:
            raise ValueError("crop_aspect_range must be ordered and positive")
        if self.out_width < 4 or self.out_height < 4 or self.out_width % 4 or self.out_height % 4:
            raise ValueError("output size must be >= 4 and divisible by 4")
        if self.max_resample_attempts < 1:
            raise ValueError("max_resample_attempts must be >= 1")


# -- point clouds -------------------------------------------------------------

@dataclass
class PointTransform:
    theta: float = 0.0
    flip_x: bool = False
    flip_y: bool = False
    cuboid_center: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    cuboid_half: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    attempts: int = 1

    def to_dict(self):
        return {"theta": self.theta, "flip_x": self.flip_x, "flip_y": self.flip_y,
                "cuboid": {"center": list(self.cuboid_center), "half_sides": list(self.cuboid_half)}}


def rotate_flip(points: np.ndarray, theta: float, flip_x: bool, flip_y: bool) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    x, y = points[:, 0], points[:, 1]
    out = np.stack([c * x - s * y, s * x + c * y, points[:, 2]], axis=1)
    if flip_x:
        out[:, 0] = -out[:, 0]
    if flip_y:
        out[:, 1] = -out[:, 1]
    return out


def _inside_cuboid(points, center, half):
    return np.all(np.abs(points - np.asarray(center)) <= np.asarray(half), axis=1)


def _remap_pairs(pairs: PairList, keep: np.ndarray) -> PairList:
    new_index = np.cumsum(keep) - 1
    t = pairs.triples[keep[pairs.points]]
    t = t.copy()
    t[:, 0] = new_index[t[:, 0]]
    return PairList(t)


def apply_point_transform(cloud: PointCloud, pairs: PairList, rec: PointTransform):
    """Replay a recorded point-cloud augmentation; returns ``(cloud, pairs, kept)``."""
    moved = rotate_flip(cloud.points, rec.theta, rec.flip_x, rec.flip_y)
    keep = ~_inside_cuboid(moved, rec.cuboid_center, rec.cuboid_half)
    labels = None if cloud.labels is None else cloud.labels[keep]
    return PointCloud(moved[keep], labels), _remap_pairs(pairs, keep), np.flatnonzero(keep)


@dataclass
class AugmentedCloud:
    cloud: PointCloud
    pairs: PairList
    record: PointTransform
    kept: np.ndarray  # original index of every surviving point


def augment_point_cloud(cloud: PointCloud, pairs: PairList, cfg: AugmentConfig,
                        rng: np.random.Generator) -> AugmentedCloud:
    if len(pairs) and pairs.points.max() >= len(cloud):
        raise ValueError("pair list refers to points outside the cloud")
    theta = float(rng.uniform(0.0, 2.0 * np.pi)) if cfg.rotate_z else 0.0
    flip_x = bool(rng.random() < cfg.flip_x_prob)
    flip_y = bool(rng.random() < cfg.flip_y_prob)
    moved = rotate_flip(cloud.points, theta, flip_x, flip_y)
    extent = moved.max(0) - moved.min(0)

    for attempt in range(1, cfg.max_resample_attempts + 1):
        center = moved[rng.integers(len(moved))]
        half = 0.5 * rng.uniform(0.0, 1.0, size=3) * cfg.cuboid_max_frac * extent
        dropped = _inside_cuboid(moved, center, half)
        surviving = int(np.count_nonzero(~dropped[pairs.points]))
        if surviving >= cfg.min_pairs:
            rec = PointTransform(theta, flip_x, flip_y, center.tolist(), half.tolist(), attempt)
            out, out_pairs, kept = apply_point_transform(cloud, pairs, rec)
            return AugmentedCloud(out, out_pairs, rec, kept)
    raise AugmentationError("cannot satisfy pair constraint")


# -- images ---------------------------------------------------------------------

@dataclass
class ImageTransform:
    x: int
    y: int
    w: int
    h: int
    flipped: bool
    src_width: int
    src_height: int
    out_width: int
    out_height: int
    attempts: int = 1

    def to_dict(self):
        return {"crop": {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "flipped": self.flipped}}

    @classmethod
    def identity(cls, width, height):
        return cls(0, 0, width, height, False, width, height, width, height)


def transform_image(img: Image, rec: ImageTransform) -> Image:
    rgb = img.rgb[:, ::-1] if rec.flipped else img.rgb
    rows = interp_matrix(rec.out_height, rec.src_height, rec.y, rec.h / rec.out_height)
    cols = interp_matrix(rec.out_width, rec.src_width, rec.x, rec.w / rec.out_width)
    return Image(np.clip(resample(rgb, rows, cols), 0.0, 1.0))


def _nearest_source(n_out, start, size):
    src = np.floor(start + (np.arange(n_out) + 0.5) * size / n_out).astype(np.int64)
    return np.clip(src, start, start + size - 1)


def transform_partition(part: SuperpixelPartition, rec: ImageTransform) -> SuperpixelPartition:
    labels = part.labels[:, ::-1] if rec.flipped else part.labels
    rows = _nearest_source(rec.out_height, rec.y, rec.h)
    cols = _nearest_source(rec.out_width, rec.x, rec.w)
    return SuperpixelPartition(relabel_contiguous(labels[np.ix_(rows, cols)]))


def transform_pixels(pixels: np.ndarray, rec: ImageTransform):
    """Map 1-based source pixel indices; returns ``(inside_mask, new_indices)``."""
    zb = np.asarray(pixels, dtype=np.int64) - 1
    col, row = zb % rec.src_width, zb // rec.src_width
    if rec.flipped:
        col = rec.src_width - 1 - col
    inside = (col >= rec.x) & (col < rec.x + rec.w) & (row >= rec.y) & (row < rec.y + rec.h)
    new_col = np.floor((col - rec.x + 0.5) * rec.out_width / rec.w).astype(np.int64)
    new_row = np.floor((row - rec.y + 0.5) * rec.out_height / rec.h).astype(np.int64)
    new_col = np.clip(new_col, 0, rec.out_width - 1)
    new_row = np.clip(new_row, 0, rec.out_height - 1)
    return inside, new_row * rec.out_width + new_col + 1


def transform_pairs(pairs: PairList, rec: ImageTransform) -> PairList:
    inside, new_pix = transform_pixels(pairs.pixels, rec)
    t = pairs.triples[inside].copy()
    t[:, 2] = new_pix[inside]
    return PairList(t)


@dataclass
class AugmentedImage:
    image: Image
    partition: SuperpixelPartition
    pairs: PairList
    record: ImageTransform


def _draw_crop(W, H, cfg: AugmentConfig, rng):
    M = W * H
    lo, hi = cfg.crop_aspect_range
    area = rng.uniform(cfg.crop_min_area_frac, 1.0) * M
    ratio = rng.uniform(lo, hi)
    w = int(round(np.sqrt(area * ratio)))
    h = int(round(np.sqrt(area / ratio)))
    if not (1 <= w <= W and 1 <= h <= H):
        return None
    if w * h < cfg.crop_min_area_frac * M or not lo <= w / h <= hi:
        return None
    x = int(rng.integers(0, W - w + 1))
    y = int(rng.integers(0, H - h + 1))
    return x, y, w, h


def augment_image(img: Image, part: SuperpixelPartition, pairs: PairList, cfg: AugmentConfig,
                  rng: np.random.Generator) -> AugmentedImage:
    if (part.width, part.height) != (img.width, img.height):
        raise ValueError("partition and image sizes differ")
    if len(pairs) and len(np.unique(pairs.cameras)) > 1:
        raise ValueError("augment_image expects the pairs of a single camera")
    W, H = img.width, img.height
    flipped = bool(rng.random() < cfg.hflip_prob)
    needed = max(cfg.image_min_pairs, cfg.image_min_frac * len(pairs))

    for attempt in range(1, cfg.max_resample_attempts + 1):
        crop = _draw_crop(W, H, cfg, rng)
        if crop is None:
            continue
        rec = ImageTransform(*crop, flipped, W, H, cfg.out_width, cfg.out_height, attempt)
        inside, _ = transform_pixels(pairs.pixels, rec)
        if np.count_nonzero(inside) >= needed:
            return AugmentedImage(transform_image(img, rec), transform_partition(part, rec),
                                  transform_pairs(pairs, rec), rec)
    raise AugmentationError("cannot satisfy image pair constraint")


def record_to_json(point_rec: PointTransform | None = None, image_rec: ImageTransform | None = None):
    doc = {}
    if point_rec is not None:
        doc.update(point_rec.to_dict())
    if image_rec is not None:
        doc.update(image_rec.to_dict())
    return doc

