"""Superpoint groups and point-pixel pair bookkeeping."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import PixelMap
from .superpixels import SuperpixelPartition


@dataclass
class PairList:
    """``(point, camera, pixel)`` triples; pixel indices are 1-based."""

    triples: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.triples, dtype=np.int64)
        self.triples = t.reshape(-1, 3)
        if np.any(self.triples[:, 2] <= 0):
            raise ValueError("pair pixel indices must be >= 1")
        if len(self.triples) > 1:
            key = self.triples[:, :2]
            if len(np.unique(key, axis=0)) != len(key):
                raise ValueError("at most one pair per (point, camera)")

    def __len__(self):
        return len(self.triples)

    @property
    def points(self):
        return self.triples[:, 0]

    @property
    def cameras(self):
        return self.triples[:, 1]

    @property
    def pixels(self):
        return self.triples[:, 2]

    def for_camera(self, c: int) -> "PairList":
        return PairList(self.triples[self.triples[:, 1] == c])

    def to_pixel_map(self, num_points: int, sizes) -> PixelMap:
        index = np.zeros((len(sizes), num_points), dtype=np.int64)
        index[self.cameras, self.points] = self.pixels
        return PixelMap(index, list(sizes))

    @classmethod
    def concat(cls, lists) -> "PairList":
        parts = [p.triples for p in lists]
        return cls(np.concatenate(parts) if parts else np.zeros((0, 3), np.int64))


def pairs_from_map(pm: PixelMap) -> PairList:
    cam, pt = np.nonzero(pm.index)
    order = np.lexsort((cam, pt))
    cam, pt = cam[order], pt[order]
    return PairList(np.stack([pt, cam, pm.index[cam, pt]], axis=1))


@dataclass
class SuperpointGroups:
    """Per camera, superpixel id -> sorted point indices (non-empty groups only)."""

    groups: list[dict[int, np.ndarray]]

    def __len__(self):
        return len(self.groups)

    def to_json(self) -> str:
        doc = [
            {"camera": c, "groups": {str(s): idx.tolist() for s, idx in g.items()}}
            for c, g in enumerate(self.groups)
        ]
        return json.dumps(doc)


def group_superpoints(pm: PixelMap, parts: list[SuperpixelPartition]) -> SuperpointGroups:
    if len(parts) != pm.num_cameras:
        raise ValueError(f"pixel map has {pm.num_cameras} cameras but {len(parts)} partitions given")
    out = []
    for c, part in enumerate(parts):
        if (part.width, part.height) != tuple(pm.sizes[c]):
            raise ValueError(f"camera {c}: partition size {(part.width, part.height)} "
                             f"does not match image size {tuple(pm.sizes[c])}")
        row = pm.index[c]
        vis = np.flatnonzero(row)
        sp = part.labels.ravel()[row[vis] - 1]
        order = np.lexsort((vis, sp))
        vis, sp = vis[order], sp[order]
        ids, starts = np.unique(sp, return_index=True)
        bounds = list(starts[1:]) + [len(sp)]
        out.append({int(s): vis[a:b] for s, a, b in zip(ids, starts, bounds)})
    return SuperpointGroups(out)
