"""Feature extractors and projection heads.

The 2D backbone is frozen and parameter-free; everything downstream of it is a
small numpy model with hand-written backward passes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import CylVoxelSpec, PointCloud, cylindrical_coords, cylindrical_voxelize, voxel_occupancy
from .resample import interp_matrix, resample, resample_transpose
from .superpixels import Image

PATCH = 4
BACKBONE_SEED = 20220301
DESCRIPTOR_DIM = 8
DENSITY_RADIUS = 0.5
# fixed per-channel scales that bring raw descriptors to O(1)
DESCRIPTOR_SCALE = np.array([20.0, 2.0, 1.0, 1.0, 10.0, 20.0, 2.0, 1.0])
NORM_EPS = 1e-12


class DegenerateEmbedding(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    D: int = 32
    E: int = 64
    F: int = 16

    def __post_init__(self):
        if min(self.D, self.E, self.F) < 2:
            raise ValueError("model widths must be >= 2")


PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wp", "bp", "Wi", "bi")


def param_shapes(dims: ModelDims, k: int = DESCRIPTOR_DIM):
    return {
        "W1": (k, dims.D), "b1": (dims.D,), "W2": (dims.D, dims.D), "b2": (dims.D,),
        "Wp": (dims.D, dims.F), "bp": (dims.F,), "Wi": (dims.E, dims.F), "bi": (dims.F,),
    }


@dataclass
class HeadParams:
    """Trunk (W1, b1, W2, b2), point head (Wp, bp) and image head (Wi, bi)."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    Wp: np.ndarray
    bp: np.ndarray
    Wi: np.ndarray
    bi: np.ndarray

    @property
    def dims(self) -> ModelDims:
        return ModelDims(D=self.W2.shape[0], E=self.Wi.shape[0], F=self.Wp.shape[1])

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "HeadParams":
        return HeadParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def validate(self):
        dims = self.dims
        expected = param_shapes(dims, self.W1.shape[0])
        for name, arr in self.as_dict().items():
            if arr.shape != expected[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")


def init_params(dims: ModelDims, seed: int, k: int = DESCRIPTOR_DIM) -> HeadParams:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(dims, k).items():
        if name.startswith("W"):
            out[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            out[name] = np.zeros(shape)
    return HeadParams(**out)


# -- 2D backbone ----------------------------------------------------------------

def _mixing_matrix(n_out: int) -> np.ndarray:
    rng = np.random.default_rng(BACKBONE_SEED)
    return rng.normal(0.0, 1.0, size=(PATCH * PATCH * 3, max(n_out, 0))) / np.sqrt(PATCH * PATCH * 3)


def toy_image_backbone(img: Image, E: int = 64) -> np.ndarray:
    """Frozen stand-in image encoder, output ``(H/4, W/4, E)``.

    Each output cell summarises only its own 4x4 patch: channel means, channel
    standard deviations, mean absolute horizontal and vertical differences, then
    fixed random projections of the centred patch through ``tanh``.
    """
    H, W = img.height, img.width
    if H % PATCH or W % PATCH:
        raise ValueError("image dimensions must be divisible by 4")
    h, w = H // PATCH, W // PATCH
    patches = img.rgb.reshape(h, PATCH, w, PATCH, 3).transpose(0, 2, 1, 3, 4)  # h, w, 4, 4, 3
    mean = patches.mean(axis=(2, 3))
    std = patches.std(axis=(2, 3))
    gx = np.abs(np.diff(patches, axis=3)).mean(axis=(2, 3, 4))
    gy = np.abs(np.diff(patches, axis=2)).mean(axis=(2, 3, 4))
    flat = patches.reshape(h, w, -1)
    mix = np.tanh(2.0 * (flat - 0.5) @ _mixing_matrix(E - 8))
    feats = np.concatenate([mean, std, gx[..., None], gy[..., None], mix], axis=-1)
    return feats[..., :E]


# -- 3D inputs and trunk --------------------------------------------------------

def point_descriptor(cloud: PointCloud, voxel_ids: np.ndarray | None = None,
                     spec: CylVoxelSpec = CylVoxelSpec()) -> np.ndarray:
    """Raw per-point descriptors ``(N, 8)``.

    Columns: radius, z, sin(azimuth), cos(azimuth), voxel occupancy, number of
    points within 0.5 m (self included), height above the lowest point, and a
    reserved zero channel.
    """
    if voxel_ids is None:
        voxel_ids, _ = cylindrical_voxelize(cloud, spec)
    pts = cloud.points
    r, az, z = cylindrical_coords(pts)
    rad = np.radians(az)
    occ = voxel_occupancy(voxel_ids)
    density = cKDTree(pts).query_ball_point(pts, DENSITY_RADIUS, return_length=True)
    out = np.zeros((len(pts), DESCRIPTOR_DIM))
    out[:, 0] = r
    out[:, 1] = z
    out[:, 2] = np.sin(rad)
    out[:, 3] = np.cos(rad)
    out[:, 4] = occ
    out[:, 5] = density
    out[:, 6] = z - z.min()
    return out


def normalized_descriptor(cloud: PointCloud, spec: CylVoxelSpec = CylVoxelSpec()) -> np.ndarray:
    return point_descriptor(cloud, spec=spec) / DESCRIPTOR_SCALE


def trainable_point_net(desc: np.ndarray, params: HeadParams, return_cache: bool = False):
    desc = np.asarray(desc, dtype=np.float64)
    if desc.ndim != 2 or desc.shape[1] != params.W1.shape[0]:
        raise ValueError(f"descriptor shape {desc.shape} does not match W1 {params.W1.shape}")
    hidden = np.tanh(desc @ params.W1 + params.b1)
    out = hidden @ params.W2 + params.b2
    if return_cache:
        return out, (desc, hidden)
    return out


def trunk_backward(d_out: np.ndarray, cache, params: HeadParams) -> dict[str, np.ndarray]:
    desc, hidden = cache
    d_hidden = d_out @ params.W2.T
    d_pre = d_hidden * (1.0 - hidden ** 2)
    return {
        "W2": hidden.T @ d_out, "b2": d_out.sum(0),
        "W1": desc.T @ d_pre, "b1": d_pre.sum(0),
    }


# -- heads ----------------------------------------------------------------------

def l2_normalize(x: np.ndarray):
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm < NORM_EPS):
        raise DegenerateEmbedding("degenerate embedding")
    return x / norm, norm


def l2_normalize_backward(d_y: np.ndarray, y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    # Jacobian (I - y y^T) / ||x|| applied row-wise
    return (d_y - y * (d_y * y).sum(-1, keepdims=True)) / norm


def point_head(pf: np.ndarray, params: HeadParams, return_cache: bool = False):
    pre = pf @ params.Wp + params.bp
    out, norm = l2_normalize(pre)
    if return_cache:
        return out, (pf, out, norm)
    return out


def point_head_backward(d_out, cache, params: HeadParams):
    pf, out, norm = cache
    d_pre = l2_normalize_backward(d_out, out, norm)
    return d_pre @ params.Wp.T, {"Wp": pf.T @ d_pre, "bp": d_pre.sum(0)}


def upsample_matrices(h: int, w: int, factor: int = PATCH):
    if factor < 1 or int(factor) != factor:
        raise ValueError("upsampling factor must be a positive integer")
    return (interp_matrix(h * factor, h, 0.0, 1.0 / factor),
            interp_matrix(w * factor, w, 0.0, 1.0 / factor))


def bilinear_upsample(grid: np.ndarray, factor: int = PATCH) -> np.ndarray:
    """Bilinear upsampling of an ``(h, w, C)`` grid, sample-center convention, border clamp."""
    grid = np.asarray(grid, dtype=np.float64)
    rows, cols = upsample_matrices(grid.shape[0], grid.shape[1], factor)
    return resample(grid, rows, cols)


def image_head(fm: np.ndarray, params: HeadParams, return_cache: bool = False):
    """1x1 convolution at feature resolution, x4 bilinear upsampling, per-pixel l2 norm."""
    if fm.shape[-1] != params.Wi.shape[0]:
        raise ValueError(f"feature map has {fm.shape[-1]} channels, head expects {params.Wi.shape[0]}")
    low = fm @ params.Wi + params.bi
    rows, cols = upsample_matrices(fm.shape[0], fm.shape[1])
    up = resample(low, rows, cols)
    out, norm = l2_normalize(up)
    if return_cache:
        return out, (fm, rows, cols, out, norm)
    return out


def image_head_backward(d_out, cache, params: HeadParams):
    fm, rows, cols, out, norm = cache
    d_up = l2_normalize_backward(d_out, out, norm)
    d_low = resample_transpose(d_up, rows, cols)
    E = fm.shape[-1]
    return {"Wi": fm.reshape(-1, E).T @ d_low.reshape(-1, d_low.shape[-1]),
            "bi": d_low.sum(axis=(0, 1))}


# -- checkpoints ----------------------------------------------------------------

def save_params(path, params: HeadParams, extra: dict | None = None) -> None:
    """Write ``<path>`` (little-endian float64 blob) and ``<path>.json`` (shapes, checksum)."""
    path = Path(path)
    blob = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.as_dict().values())
    path.write_bytes(blob)
    dims = params.dims
    meta = {
        "dims": {"D": dims.D, "E": dims.E, "F": dims.F},
        "order": list(PARAM_NAMES),
        "shapes": {k: list(v.shape) for k, v in params.as_dict().items()},
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        meta["extra"] = extra
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_params(path) -> HeadParams:
    path = Path(path)
    blob = path.read_bytes()
    meta = json.loads(Path(str(path) + ".json").read_text())
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise ValueError(f"{path}: checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f8").astype(np.float64)
    out, pos = {}, 0
    for name in meta["order"]:
        shape = tuple(meta["shapes"][name])
        n = int(np.prod(shape))
        out[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    if pos != len(flat):
        raise ValueError(f"{path}: blob size does not match the sidecar")
    params = HeadParams(**out)
    params.validate()
    return params
