"""Superpixel segmentation: SLIC and Felzenszwalb-Huttenlocher (FH).

Both segmenters return a :class:`SuperpixelPartition` whose ids are contiguous
and whose regions are 4-connected.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab
from skimage.measure import label as connected_label

# Reference FH parameters were tuned on 1600x900 frames.
FH_REFERENCE_PIXELS = 1600 * 900
FH_SCALE = 300.0
FH_SIGMA = 0.35
FH_MIN_SIZE = 4000


@dataclass
class Image:
    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("image must be H x W x 3")
        if self.height < 4 or self.width < 4:
            raise ValueError("image must be at least 4x4")
        if np.any(self.rgb < 0) or np.any(self.rgb > 1) or not np.all(np.isfinite(self.rgb)):
            raise ValueError("channel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class SuperpixelPartition:
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError("label map must be 2-D")
        present = np.unique(self.labels)
        if present[0] != 0 or present[-1] != len(present) - 1:
            raise ValueError("superpixel ids must be contiguous from 0")

    @property
    def count(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def is_connected(self) -> bool:
        comps = connected_label(self.labels, background=-1, connectivity=1)
        return int(comps.max()) == self.count


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    """Map ids to 0..Q'-1 keeping their relative order."""
    _, inverse = np.unique(labels, return_inverse=True)
    return inverse.reshape(labels.shape).astype(np.int64)


# -- SLIC ---------------------------------------------------------------------

def _grid_shape(q: int, width: int, height: int):
    nx = int(np.ceil(np.sqrt(q * width / height)))
    nx = max(1, min(nx, width, q))
    ny = max(1, min(q // nx, height))
    return nx, ny


def _gradient_magnitude(lab: np.ndarray) -> np.ndarray:
    pad = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    gx = pad[1:-1, 2:] - pad[1:-1, :-2]
    gy = pad[2:, 1:-1] - pad[:-2, 1:-1]
    return (gx ** 2).sum(-1) + (gy ** 2).sum(-1)


def _initial_centers(lab, q):
    H, W = lab.shape[:2]
    nx, ny = _grid_shape(q, W, H)
    xs = (np.arange(nx) + 0.5) * W / nx - 0.5
    ys = (np.arange(ny) + 0.5) * H / ny - 0.5
    grad = _gradient_magnitude(lab)
    centers = []
    for y in ys:
        for x in xs:
            cx, cy = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
            best = grad[cy, cx]
            px, py = x, y
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = cy + dy, cx + dx
                    if 0 <= yy < H and 0 <= xx < W and grad[yy, xx] < best:
                        best, px, py = grad[yy, xx], float(xx), float(yy)
            iy, ix = int(np.floor(py + 0.5)), int(np.floor(px + 0.5))
            centers.append([*lab[iy, ix], px, py])
    return np.asarray(centers, dtype=np.float64)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge every non-largest component of a label into its largest adjacent superpixel."""
    comps = connected_label(labels, background=-1, connectivity=1) - 1
    ncomp = int(comps.max()) + 1
    comp_size = np.bincount(comps.ravel(), minlength=ncomp)
    comp_label = np.zeros(ncomp, dtype=np.int64)
    comp_label[comps.ravel()] = labels.ravel()

    # largest component per label is kept; ties go to the first in raster order
    main = {}
    for comp in range(ncomp):
        lab = comp_label[comp]
        if lab not in main or comp_size[comp] > comp_size[main[lab]]:
            main[lab] = comp
    owner = np.full(ncomp, -1, dtype=np.int64)
    for lab, comp in main.items():
        owner[comp] = lab
    if len(main) == ncomp:
        return labels

    # component adjacency from horizontal and vertical neighbour pairs
    a = np.concatenate([comps[:, :-1].ravel(), comps[:-1, :].ravel()])
    b = np.concatenate([comps[:, 1:].ravel(), comps[1:, :].ravel()])
    diff = a != b
    edges = np.unique(np.stack([a[diff], b[diff]], 1), axis=0)
    neighbours = [[] for _ in range(ncomp)]
    for u, v in edges:
        neighbours[u].append(v)
        neighbours[v].append(u)

    label_size = np.zeros(int(labels.max()) + 1, dtype=np.int64)
    for lab, comp in main.items():
        label_size[lab] = comp_size[comp]

    pending = [c for c in range(ncomp) if owner[c] < 0]
    while pending:
        deferred = []
        for comp in pending:
            cands = {owner[n] for n in neighbours[comp] if owner[n] >= 0}
            if not cands:
                deferred.append(comp)
                continue
            target = min(cands, key=lambda lab: (-label_size[lab], lab))
            owner[comp] = target
            label_size[target] += comp_size[comp]
        if len(deferred) == len(pending):
            raise RuntimeError("connectivity enforcement made no progress")
        pending = deferred
    return owner[comps]


def slic(img: Image, q: int = 150, compactness: float = 10.0, iters: int = 10,
         seed: int = 0) -> SuperpixelPartition:
    """SLIC superpixels on the CIELAB image.

    Initialisation is a fixed grid, so ``seed`` never changes the output; it is
    accepted to keep the segmenter signatures uniform.
    """
    H, W = img.height, img.width
    M = H * W
    if q > M:
        raise ValueError("more superpixels than pixels")
    if q < 1 or iters < 1:
        raise ValueError("q and iters must be >= 1")

    lab = rgb2lab(img.rgb)
    centers = _initial_centers(lab, q)
    S = np.sqrt(M / q)
    yy, xx = np.mgrid[0:H, 0:W]
    feats = np.concatenate([lab.reshape(M, 3), xx.reshape(M, 1), yy.reshape(M, 1)], 1)
    spatial_w = (compactness / S) ** 2

    K = len(centers)
    labels = np.zeros(M, dtype=np.int64)
    for _ in range(iters):
        best = np.full((H, W), np.inf)
        lab_map = np.full((H, W), -1, dtype=np.int64)
        # classic 2S x 2S search window around each center; earlier centers win ties
        for k in range(K):
            L, A, B, cx, cy = centers[k]
            x0, x1 = max(0, int(np.ceil(cx - S))), min(W - 1, int(np.floor(cx + S)))
            y0, y1 = max(0, int(np.ceil(cy - S))), min(H - 1, int(np.floor(cy + S)))
            if x0 > x1 or y0 > y1:
                continue
            win = lab[y0:y1 + 1, x0:x1 + 1]
            dc = (win[..., 0] - L) ** 2 + (win[..., 1] - A) ** 2 + (win[..., 2] - B) ** 2
            ds = (xx[y0:y1 + 1, x0:x1 + 1] - cx) ** 2 + (yy[y0:y1 + 1, x0:x1 + 1] - cy) ** 2
            d = dc + spatial_w * ds
            sub = best[y0:y1 + 1, x0:x1 + 1]
            better = d < sub
            sub[better] = d[better]
            lab_map[y0:y1 + 1, x0:x1 + 1][better] = k
        labels = lab_map.ravel()
        lost = np.flatnonzero(labels < 0)
        if len(lost):
            d = ((feats[lost, None, :3] - centers[None, :, :3]) ** 2).sum(-1) \
                + spatial_w * ((feats[lost, None, 3:] - centers[None, :, 3:]) ** 2).sum(-1)
            labels[lost] = d.argmin(1)
        counts = np.bincount(labels, minlength=K)
        nz = counts > 0
        for j in range(5):
            sums = np.bincount(labels, weights=feats[:, j], minlength=K)
            centers[nz, j] = sums[nz] / counts[nz]

    out = _enforce_connectivity(labels.reshape(H, W))
    return SuperpixelPartition(relabel_contiguous(out))


# -- Felzenszwalb-Huttenlocher ------------------------------------------------

def gaussian_smooth(rgb: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.array(rgb, dtype=np.float64, copy=True)
    return ndimage.gaussian_filter(np.asarray(rgb, dtype=np.float64), sigma=(sigma, sigma, 0),
                                   mode="nearest", truncate=4.0)


def grid_edges_8(height: int, width: int):
    """Edges of the 8-connected grid graph as ``(a, b)`` flat pixel indices."""
    idx = np.arange(height * width).reshape(height, width)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),
        (idx[:-1, :], idx[1:, :]),
        (idx[:-1, :-1], idx[1:, 1:]),
        (idx[:-1, 1:], idx[1:, :-1]),
    ]
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    return a, b


class _DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x):
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b, w=0.0):
        if self.size[a] < self.size[b] or (self.size[a] == self.size[b] and b < a):
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = max(self.internal[a], self.internal[b], w)
        return a


def felzenszwalb(img: Image, scale: float = FH_SCALE, sigma: float = FH_SIGMA,
                 min_size: int = FH_MIN_SIZE) -> SuperpixelPartition:
    """Graph-based segmentation on RGB Euclidean edge weights (8-connectivity).

    Components are then split into 4-connected pieces and pieces smaller than
    ``min_size`` are merged into 4-adjacent neighbours.
    """
    if scale <= 0 or sigma < 0 or min_size < 1:
        raise ValueError("need scale > 0, sigma >= 0, min_size >= 1")
    H, W = img.height, img.width
    rgb = gaussian_smooth(img.rgb, sigma).reshape(-1, 3)
    a, b = grid_edges_8(H, W)
    w = np.sqrt(((rgb[a] - rgb[b]) ** 2).sum(1))
    order = np.argsort(w, kind="stable")

    ds = _DisjointSet(H * W)
    a_l, b_l, w_l = a.tolist(), b.tolist(), w.tolist()
    for e in order.tolist():
        ra, rb = ds.find(a_l[e]), ds.find(b_l[e])
        if ra == rb:
            continue
        we = w_l[e]
        if we <= min(ds.internal[ra] + scale / ds.size[ra], ds.internal[rb] + scale / ds.size[rb]):
            ds.union(ra, rb, we)

    roots = np.array([ds.find(i) for i in range(H * W)])
    # a component joined only through diagonal edges is split into its 4-connected pieces
    labels = connected_label(roots.reshape(H, W), background=-1, connectivity=1) - 1
    labels = _merge_small(labels, rgb, min_size)
    return SuperpixelPartition(relabel_contiguous(labels))


def _merge_small(labels: np.ndarray, rgb: np.ndarray, min_size: int) -> np.ndarray:
    """Repeatedly fold the smallest under-sized region into its most similar neighbour.

    Similarity is the Euclidean distance between mean region colours; ties go to
    the lower id. Regions are processed smallest first (lowest id on ties), which
    makes the result monotone in ``min_size``.
    """
    flat = labels.ravel()
    n = int(flat.max()) + 1
    size = np.bincount(flat, minlength=n).astype(np.int64)
    csum = np.stack([np.bincount(flat, weights=rgb[:, k], minlength=n) for k in range(3)], 1)
    idx = np.arange(labels.size).reshape(labels.shape)
    # 4-adjacency only, so merged regions stay 4-connected
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    la, lb = flat[a], flat[b]
    diff = la != lb
    adj = [set() for _ in range(n)]
    for u, v in zip(la[diff], lb[diff]):
        adj[u].add(v)
        adj[v].add(u)

    alive = set(range(n))
    remap = np.arange(n)
    while len(alive) > 1:
        small = min(alive, key=lambda r: (size[r], r))
        if size[small] >= min_size:
            break
        mean_s = csum[small] / size[small]
        target = min(adj[small], key=lambda r: (float(np.linalg.norm(csum[r] / size[r] - mean_s)), r))
        size[target] += size[small]
        csum[target] += csum[small]
        for nb in adj[small]:
            adj[nb].discard(small)
            if nb != target:
                adj[nb].add(target)
                adj[target].add(nb)
        adj[small] = set()
        alive.discard(small)
        remap[remap == small] = target
    return remap[labels]


def partition_stats(part: SuperpixelPartition):
    """Per-superpixel pixel counts and the number of 4-adjacent pairs with differing labels."""
    counts = np.bincount(part.labels.ravel(), minlength=part.count)
    lab = part.labels
    boundary = int((lab[:, 1:] != lab[:, :-1]).sum() + (lab[1:, :] != lab[:-1, :]).sum())
    return counts, boundary


def fh_params_for(width: int, height: int):
    """FH parameters with ``min_size`` scaled from nuScenes frames to the given size."""
    frac = width * height / FH_REFERENCE_PIXELS
    return {"scale": FH_SCALE, "sigma": FH_SIGMA, "min_size": max(1, int(round(FH_MIN_SIZE * frac)))}


# -- image and label-map files ------------------------------------------------

def write_ppm(path, img: Image) -> None:
    data = np.clip(np.floor(img.rgb * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise ValueError(f"expected a {magic.decode()} file")
    fields, pos = [], 2
    while len(fields) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    return fields, pos + 1


def read_ppm(path) -> Image:
    data = Path(path).read_bytes()
    (w, h, maxval), off = _read_netpbm_header(data, b"P6")
    dtype = ">u2" if maxval > 255 else np.uint8
    arr = np.frombuffer(data[off:], dtype=dtype, count=w * h * 3).reshape(h, w, 3)
    return Image(arr.astype(np.float64) / maxval)


def write_pgm16(path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.min() < 0 or values.max() > 65535:
        raise ValueError("PGM values must fit in 16 bits")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(values.astype(">u2").tobytes())


def read_pgm16(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (w, h, maxval), off = _read_netpbm_header(data, b"P5")
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(data[off:], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def save_image(path, img: Image) -> None:
    np.save(path, img.rgb)


def load_image(path) -> Image:
    return Image(np.load(path))
