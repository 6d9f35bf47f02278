"""Deterministic synthetic driving scenes with exact Lidar-camera correspondences.

Scenes hold a ground plane, box "vehicles" and cylinder "poles". A rotating
multi-beam Lidar and C pinhole cameras ray-cast the same analytic geometry, so
per-point labels, per-pixel labels and point-pixel pairs are all exact.
"""
from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correspondence import PairList
from .geometry import CameraModel, CameraRig, PointCloud, project_points, write_calibration, write_cloud
from .superpixels import Image, write_pgm16, write_ppm

GROUND, VEHICLE, POLE = 0, 1, 2
CLASS_NAMES = ("ground", "vehicle", "pole")
NUM_CLASSES = 3
SKY = -1
MIN_PAIRS = 1024
_EPS = 1e-9


class SceneTooSparse(ValueError):
    pass


@dataclass
class SceneSpec:
    num_cameras: int = 2
    image_width: int = 64
    image_height: int = 48
    beams: int = 32
    azimuth_steps: int = 360
    elevation_range: tuple[float, float] = (-30.0, 10.0)  # degrees
    lidar_height: float = 1.8
    max_range: float = 60.0
    camera_hfov: float = 100.0  # degrees
    camera_offset: tuple[float, float, float] = (0.3, 0.0, -0.2)  # forward, left, up
    vehicles: tuple[int, int] = (10, 14)
    poles: tuple[int, int] = (10, 14)
    vehicle_length: tuple[float, float] = (3.5, 5.0)
    vehicle_width: tuple[float, float] = (1.6, 2.0)
    vehicle_height: tuple[float, float] = (1.4, 1.9)
    pole_radius: tuple[float, float] = (0.3, 0.5)
    pole_height: tuple[float, float] = (3.0, 5.0)
    placement_radius: tuple[float, float] = (3.5, 12.0)
    hue_jitter: float = 0.05
    corruption: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("elevation_range", "camera_offset", "vehicles", "poles", "vehicle_length",
                     "vehicle_width", "vehicle_height", "pole_radius", "pole_height", "placement_radius"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.num_cameras < 1:
            raise ValueError("num_cameras must be >= 1")
        if (self.image_width % 4 or self.image_height % 4 or self.image_width < 4
                or self.image_height < 4):
            raise ValueError("image dimensions must be >= 4 and divisible by 4")
        for name in ("corruption", "dropout"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.beams < 1 or self.azimuth_steps < 1:
            raise ValueError("beams and azimuth_steps must be >= 1")
        for name in ("vehicles", "poles"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ordered count range")


@dataclass
class SceneObject:
    kind: int
    center: np.ndarray  # x, y on the ground
    yaw: float
    size: np.ndarray  # boxes: length, width, height; poles: radius, radius, height
    color: np.ndarray


@dataclass
class Scene:
    cloud: PointCloud
    images: list[Image]
    rig: CameraRig
    pairs: PairList
    pixel_labels: list[np.ndarray]
    point_instances: np.ndarray
    pixel_instances: list[np.ndarray]
    objects: list[SceneObject] = field(default_factory=list)

    @property
    def partitions_shape(self):
        return [(img.width, img.height) for img in self.images]


# -- ray casting -------------------------------------------------------------------

def _hit_ground(orig, dirs, ground_z):
    oz = np.broadcast_to(orig[..., 2], (len(dirs),))
    t = np.full(len(dirs), np.inf)
    down = dirs[:, 2] < -_EPS
    t[down] = (ground_z - oz[down]) / dirs[down, 2]
    t[t <= _EPS] = np.inf
    normals = np.tile([0.0, 0.0, 1.0], (len(dirs), 1))
    return t, normals


def _hit_box(orig, dirs, obj: SceneObject, ground_z):
    c, s = np.cos(obj.yaw), np.sin(obj.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box
    half = obj.size / 2.0
    center = np.array([obj.center[0], obj.center[1], ground_z + half[2]])
    o = (orig - center) @ rot.T
    d = dirs @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_near > _EPS)
    t = np.where(hit, t_near, np.inf)
    axis = tmin.argmax(axis=1)
    n_local = np.zeros((len(dirs), 3))
    n_local[np.arange(len(dirs)), axis] = -np.sign(d[np.arange(len(dirs)), axis])
    return t, n_local @ rot


def _hit_pole(orig, dirs, obj: SceneObject, ground_z):
    radius, height = obj.size[0], obj.size[2]
    ox = orig[..., 0] - obj.center[0]
    oy = orig[..., 1] - obj.center[1]
    ox = np.broadcast_to(ox, (len(dirs),))
    oy = np.broadcast_to(oy, (len(dirs),))
    oz = np.broadcast_to(orig[..., 2], (len(dirs),))
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = 2 * (ox * dx + oy * dy)
    cc = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * cc
    t = np.full(len(dirs), np.inf)
    normals = np.zeros((len(dirs), 3))
    ok = (disc >= 0) & (a > _EPS)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_side = np.where(ok, (-b - sq) / np.where(a > _EPS, 2 * a, 1.0), np.inf)
    z_side = oz + t_side * dz
    side = ok & (t_side > _EPS) & (z_side >= ground_z) & (z_side <= ground_z + height)
    t[side] = t_side[side]
    hx = ox[side] + t_side[side] * dx[side]
    hy = oy[side] + t_side[side] * dy[side]
    normals[side] = np.stack([hx, hy, np.zeros(len(hx))], 1) / radius
    # top cap
    with np.errstate(divide="ignore", invalid="ignore"):
        t_cap = (ground_z + height - oz) / dz
    cx = ox + t_cap * dx
    cy = oy + t_cap * dy
    cap = (dz < -_EPS) & (t_cap > _EPS) & (cx * cx + cy * cy <= radius * radius) & (t_cap < t)
    t[cap] = t_cap[cap]
    normals[cap] = [0.0, 0.0, 1.0]
    return t, normals


def cast(orig, dirs, objects, ground_z):
    """First hit of each ray: distance, instance id (0 = ground, -1 = none), unit normal."""
    t, normals = _hit_ground(orig, dirs, ground_z)
    inst = np.where(np.isfinite(t), 0, -1)
    for k, obj in enumerate(objects, start=1):
        fn = _hit_box if obj.kind == VEHICLE else _hit_pole
        tk, nk = fn(orig, dirs, obj, ground_z)
        closer = tk < t
        t = np.where(closer, tk, t)
        inst = np.where(closer, k, inst)
        normals[closer] = nk[closer]
    return t, inst, normals


# -- scene construction ------------------------------------------------------------

def _place_objects(spec: SceneSpec, rng) -> list[SceneObject]:
    objects: list[SceneObject] = []
    n_veh = int(rng.integers(spec.vehicles[0], spec.vehicles[1] + 1))
    n_pole = int(rng.integers(spec.poles[0], spec.poles[1] + 1))
    kinds = [VEHICLE] * n_veh + [POLE] * n_pole
    for kind in kinds:
        for _ in range(100):
            r = rng.uniform(*spec.placement_radius)
            phi = rng.uniform(0, 2 * np.pi)
            center = np.array([r * np.cos(phi), r * np.sin(phi)])
            yaw = rng.uniform(0, np.pi)
            if kind == VEHICLE:
                size = np.array([rng.uniform(*spec.vehicle_length), rng.uniform(*spec.vehicle_width),
                                 rng.uniform(*spec.vehicle_height)])
                reach = 0.5 * np.hypot(size[0], size[1])
                hue, sat, val = 0.0, 0.8, 0.85
            else:
                rad = rng.uniform(*spec.pole_radius)
                size = np.array([rad, rad, rng.uniform(*spec.pole_height)])
                reach = rad
                hue, sat, val = 0.62, 0.65, 0.9
            hue = (hue + rng.uniform(-spec.hue_jitter, spec.hue_jitter)) % 1.0
            color = np.array(colorsys.hsv_to_rgb(hue, sat, val))
            clear = all(np.linalg.norm(center - o.center) > reach + _reach(o) + 0.5 for o in objects)
            if clear and np.linalg.norm(center) > reach + 1.5:
                objects.append(SceneObject(kind, center, yaw, size, color))
                break
    return objects


def _reach(obj: SceneObject) -> float:
    return 0.5 * np.hypot(obj.size[0], obj.size[1]) if obj.kind == VEHICLE else obj.size[0]


def make_rig(spec: SceneSpec) -> CameraRig:
    W, H = spec.image_width, spec.image_height
    focal = (W / 2.0) / np.tan(np.radians(spec.camera_hfov) / 2.0)
    cams = []
    for c in range(spec.num_cameras):
        yaw = 2.0 * np.pi * c / spec.num_cameras
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        left = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
        up = np.array([0.0, 0.0, 1.0])
        rot = np.stack([-left, -up, fwd])  # rows: camera x (right), y (down), z (forward)
        off = spec.camera_offset
        pos = off[0] * fwd + off[1] * left + off[2] * up
        cams.append(CameraModel(rot, -rot @ pos, focal, focal, W / 2.0 - 0.5, H / 2.0 - 0.5, W, H))
    return CameraRig(cams)


def _ground_color(points_xy, base):
    t = np.clip(np.hypot(points_xy[:, 0], points_xy[:, 1]) / 25.0, 0.0, 1.0)[:, None]
    far = np.array([0.28, 0.46, 0.24])
    return (1.0 - t) * base + t * far


def _render(cam: CameraModel, objects, spec: SceneSpec, ground_base, light):
    W, H = cam.width, cam.height
    vv, uu = np.mgrid[0:H, 0:W]
    d_cam = np.stack([(uu.ravel() - cam.cx) / cam.fx, (vv.ravel() - cam.cy) / cam.fy,
                      np.ones(W * H)], 1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    dirs = d_cam @ cam.rotation  # camera -> lidar frame
    origin = -cam.rotation.T @ cam.translation
    t, inst, normals = cast(origin, dirs, objects, -spec.lidar_height)
    rgb = np.tile([0.65, 0.78, 0.95], (W * H, 1))
    hit_pts = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    shade = 0.55 + 0.45 * np.clip(normals @ light, 0.0, 1.0)
    g = inst == 0
    rgb[g] = _ground_color(hit_pts[g], ground_base) * shade[g, None]
    for k, obj in enumerate(objects, start=1):
        m = inst == k
        rgb[m] = obj.color * shade[m, None]
    labels = np.full(W * H, SKY, dtype=np.int64)
    labels[g] = GROUND
    for k, obj in enumerate(objects, start=1):
        labels[inst == k] = obj.kind
    return Image(np.clip(rgb, 0.0, 1.0).reshape(H, W, 3)), labels.reshape(H, W), inst.reshape(H, W)


def _scan(spec: SceneSpec, objects):
    elev = np.radians(np.linspace(spec.elevation_range[0], spec.elevation_range[1], spec.beams))
    az = 2.0 * np.pi * np.arange(spec.azimuth_steps) / spec.azimuth_steps
    E, A = np.meshgrid(elev, az, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], -1).reshape(-1, 3)
    t, inst, _ = cast(np.zeros(3), dirs, objects, -spec.lidar_height)
    valid = np.isfinite(t) & (t <= spec.max_range)
    pts = dirs[valid] * t[valid, None]
    return pts, inst[valid]


def generate_scene(spec: SceneSpec = SceneSpec(), seed: int = 0, objects: list[SceneObject] | None = None) -> Scene:
    rng = np.random.default_rng(seed)
    if objects is None:
        objects = _place_objects(spec, rng)
    ground_base = np.array([0.46, 0.43, 0.38]) + rng.uniform(-0.03, 0.03, size=3)
    light = np.array([0.4, 0.3, 0.87])
    light /= np.linalg.norm(light)
    rig = make_rig(spec)

    pts, inst = _scan(spec, objects)
    keep = rng.random(len(pts)) >= spec.dropout
    pts, inst = pts[keep], inst[keep]
    if len(pts) == 0:
        raise SceneTooSparse("scene too sparse")
    kinds = np.array([GROUND] + [o.kind for o in objects])
    cloud = PointCloud(pts, kinds[inst])

    images, pixel_labels, pixel_inst, triples = [], [], [], []
    for c, cam in enumerate(rig):
        img, lab, pinst = _render(cam, objects, spec, ground_base, light)
        images.append(img)
        pixel_labels.append(lab)
        pixel_inst.append(pinst)
        pix = project_points(cam, pts)
        vis = np.flatnonzero(pix)
        same = pinst.ravel()[pix[vis] - 1] == inst[vis]
        vis = vis[same]
        triples.append(np.stack([vis, np.full(len(vis), c), pix[vis]], 1))
    pairs = PairList(np.concatenate(triples))
    if len(pairs) < MIN_PAIRS:
        raise SceneTooSparse("scene too sparse")
    return Scene(cloud, images, rig, pairs, pixel_labels, inst, pixel_inst, objects)


def corrupt_correspondences(pairs: PairList, fraction: float, seed: int, sizes) -> PairList:
    """Send ``round(fraction * len(pairs))`` randomly chosen pairs to uniformly random pixels."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(pairs)
    count = int(np.floor(fraction * n + 0.5))
    t = pairs.triples.copy()
    if count == 0:
        return PairList(t)
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    npix = np.array([w * h for w, h in sizes])
    t[chosen, 2] = 1 + rng.integers(0, npix[t[chosen, 1]])
    return PairList(t)


def observed_pairs(scene: Scene, spec: SceneSpec, seed: int) -> PairList:
    """The correspondences a training pipeline sees, after optional corruption."""
    return corrupt_correspondences(scene.pairs, spec.corruption, seed + 7919, scene.partitions_shape)


def write_scene(directory, scene: Scene) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_cloud(d / "cloud.slpc", scene.cloud)
    for c, img in enumerate(scene.images):
        write_ppm(d / f"cam_{c}.ppm", img)
        write_pgm16(d / f"labels_{c}.pgm", scene.pixel_labels[c] + 1)
    write_calibration(d / "calib.json", scene.rig)
    with open(d / "pairs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "c", "m"])
        w.writerows(scene.pairs.triples.tolist())
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "label"])
        w.writerows(zip(range(len(scene.cloud)), scene.cloud.labels.tolist()))
