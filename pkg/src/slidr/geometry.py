"""Lidar-camera geometry: pinhole projection, pixel maps and cylindrical voxels.

Pixel indices follow a 1-based row-major convention where ``0`` marks a point
that is not visible in the camera.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NEAR_PLANE = 1e-6
SLPC_MAGIC = b"SLPC0001"


@dataclass
class PointCloud:
    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ValueError("labels must have one entry per point")
            if np.any(self.labels < 0):
                raise ValueError("labels must be non-negative class ids")

    def __len__(self):
        return len(self.points)


@dataclass
class CameraModel:
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), rtol=0, atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 4 or self.height < 4 or self.width % 4 or self.height % 4:
            raise ValueError("image dimensions must be >= 4 and divisible by 4")

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
        )


@dataclass
class CameraRig:
    cameras: list[CameraModel]

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("a rig needs at least one camera")

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __getitem__(self, c):
        return self.cameras[c]


@dataclass
class PixelMap:
    """Per-camera pixel assignment of every point, shape ``(C, N)``."""

    index: np.ndarray
    sizes: list[tuple[int, int]] = field(default_factory=list)  # (width, height) per camera

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        if self.index.ndim != 2:
            raise ValueError("pixel map index must be 2-D (cameras x points)")
        if len(self.sizes) != self.index.shape[0]:
            raise ValueError("one image size per camera is required")
        for c, (w, h) in enumerate(self.sizes):
            row = self.index[c]
            if np.any(row < 0) or np.any(row > w * h):
                raise ValueError(f"camera {c}: pixel index out of range")

    @property
    def num_cameras(self) -> int:
        return self.index.shape[0]

    @property
    def num_points(self) -> int:
        return self.index.shape[1]


@dataclass(frozen=True)
class CylVoxelSpec:
    dz: float = 0.1
    dr: float = 0.1
    dazimuth: float = 1.0

    def __post_init__(self):
        if self.dz <= 0 or self.dr <= 0 or self.dazimuth <= 0:
            raise ValueError("voxel sizes must be strictly positive")
        n = 360.0 / self.dazimuth
        if abs(n - round(n)) > 1e-9:
            raise ValueError("360 must be divisible by the azimuth step")

    @property
    def azimuth_bins(self) -> int:
        return int(round(360.0 / self.dazimuth))


def _pixel_from_image_coords(u, v, width, height):
    # nearest pixel center; halves go up (toward +x / +y)
    col = np.floor(u + 0.5)
    row = np.floor(v + 0.5)
    inside = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    idx = np.where(inside, row * width + col + 1, 0)
    return idx.astype(np.int64)


def image_coords(cam: CameraModel, points: np.ndarray):
    """Un-rounded image coordinates ``(u, v)`` and depth of every point."""
    pc = cam.to_camera(np.atleast_2d(points))
    depth = pc[:, 2]
    safe = np.where(depth > NEAR_PLANE, depth, 1.0)
    u = cam.fx * pc[:, 0] / safe + cam.cx
    v = cam.fy * pc[:, 1] / safe + cam.cy
    return u, v, depth


def project_points(cam: CameraModel, points: np.ndarray) -> np.ndarray:
    """Vectorised :func:`project_point` returning one pixel index per point."""
    u, v, depth = image_coords(cam, points)
    idx = _pixel_from_image_coords(u, v, cam.width, cam.height)
    idx[~(depth > NEAR_PLANE)] = 0
    return idx


def project_point(cam: CameraModel, p) -> int:
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    return int(project_points(cam, p)[0])


def pixel_to_xy(index, width: int):
    """Column/row of 1-based pixel indices."""
    zero_based = np.asarray(index, dtype=np.int64) - 1
    return zero_based % width, zero_based // width


def xy_to_pixel(col, row, width: int):
    return np.asarray(row, dtype=np.int64) * width + np.asarray(col, dtype=np.int64) + 1


def build_pixel_map(rig: CameraRig, cloud: PointCloud, zbuffer: bool = False) -> PixelMap:
    C, N = len(rig), len(cloud)
    index = np.zeros((C, N), dtype=np.int64)
    for c, cam in enumerate(rig):
        idx = project_points(cam, cloud.points)
        if zbuffer:
            depth = cam.to_camera(cloud.points)[:, 2]
            vis = np.flatnonzero(idx)
            # nearest point wins each pixel; equal depths resolve to the lowest point index
            order = vis[np.lexsort((vis, depth[vis]))]
            _, first = np.unique(idx[order], return_index=True)
            keep = np.zeros(N, dtype=bool)
            keep[order[first]] = True
            idx[~keep] = 0
        index[c] = idx
    return PixelMap(index, [(cam.width, cam.height) for cam in rig])


def cylindrical_coords(points: np.ndarray):
    pts = np.asarray(points, dtype=np.float64)
    r = np.hypot(pts[:, 0], pts[:, 1])
    az = np.mod(np.degrees(np.arctan2(pts[:, 1], pts[:, 0])), 360.0)
    return r, az, pts[:, 2]


def cylindrical_voxelize(cloud: PointCloud, spec: CylVoxelSpec = CylVoxelSpec()):
    """Assign every point a ``(radius, azimuth, height)`` voxel id.

    Returns ``(ids, occupied)`` where ``ids`` is ``(N, 3)`` and ``occupied`` the
    sorted unique ids.
    """
    r, az, z = cylindrical_coords(cloud.points)
    z_min = z.min()
    ids = np.stack([
        np.floor(r / spec.dr),
        np.floor(az / spec.dazimuth) % spec.azimuth_bins,
        np.floor((z - z_min) / spec.dz),
    ], axis=1).astype(np.int64)
    occupied = np.unique(ids, axis=0)
    return ids, occupied


def voxel_occupancy(ids: np.ndarray) -> np.ndarray:
    """Number of points sharing each point's voxel."""
    _, inverse, counts = np.unique(ids, axis=0, return_inverse=True, return_counts=True)
    return counts[inverse.reshape(-1)]


# -- file formats -----------------------------------------------------------

def write_cloud(path, cloud: PointCloud) -> None:
    with open(path, "wb") as fh:
        fh.write(SLPC_MAGIC)
        fh.write(struct.pack("<Q", len(cloud)))
        fh.write(cloud.points.astype("<f8").tobytes())
        if cloud.labels is not None:
            fh.write(cloud.labels.astype("<u4").tobytes())


def read_cloud(path) -> PointCloud:
    data = Path(path).read_bytes()
    if data[:8] != SLPC_MAGIC:
        raise ValueError(f"{path}: not an SLPC point cloud")
    (n,) = struct.unpack("<Q", data[8:16])
    end = 16 + 24 * n
    if len(data) < end:
        raise ValueError(f"{path}: truncated point data")
    points = np.frombuffer(data[16:end], dtype="<f8").reshape(n, 3).astype(np.float64)
    labels = None
    if len(data) > end:
        if len(data) != end + 4 * n:
            raise ValueError(f"{path}: label block has wrong size")
        labels = np.frombuffer(data[end:], dtype="<u4").astype(np.int64)
    return PointCloud(points, labels)


def write_calibration(path, rig: CameraRig) -> None:
    doc = {"cameras": [cam.to_dict() for cam in rig]}
    Path(path).write_text(json.dumps(doc, indent=2))


def read_calibration(path) -> CameraRig:
    doc = json.loads(Path(path).read_text())
    return CameraRig([CameraModel.from_dict(d) for d in doc["cameras"]])
