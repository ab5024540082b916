"""Radar frustum pillars: voxelisation, PointNet-style encoding, context/occupancy heads."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, FrustumGrid, project_points
from .tensor import F32, ShapeError, Rng, conv2d, init_uniform, linear, relu, sigmoid

POINT_FIELDS = ("x", "y", "z", "rcs", "doppler", "sweep_age")
# per-point encoder input: (dd, du, rcs, doppler, sweep_age); dd and du are
# offsets from the pillar centre in bin units (depth bins, feature columns)
FEATURE_DIM = 5
DROP_REASONS = ("behind_plane", "out_of_image", "out_of_depth", "pillar_full")


@dataclass
class RadarPointCloud:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 6)
        if not np.all(np.isfinite(pts)):
            raise ValueError("radar points must be finite")
        if np.any(pts[:, 5] < 0):
            raise ValueError("sweep_age must be non-negative")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class PillarCanvas:
    camera_index: int
    occupied: dict[tuple[int, int], list[np.ndarray]]
    feature_dim: int = FEATURE_DIM
    dropped: Counter = field(default_factory=Counter)
    kept: int = 0


@dataclass
class RadarHeadWeights:
    point_w: np.ndarray    # [C, FEATURE_DIM]
    point_b: np.ndarray
    stack: list[tuple[np.ndarray, np.ndarray]]  # conv+ReLU layers over (d, u)
    context_k: np.ndarray
    context_b: np.ndarray
    occ_k: np.ndarray      # [1, C, 3, 3]
    occ_b: np.ndarray

    @classmethod
    def init(cls, rng: Rng, channels: int, n_stack: int = 2) -> "RadarHeadWeights":
        c = channels
        pw = init_uniform(rng, (c, FEATURE_DIM), FEATURE_DIM)
        pb = init_uniform(rng, (c,), FEATURE_DIM)
        stack = [(init_uniform(rng, (c, c, 3, 3), 9 * c), init_uniform(rng, (c,), 9 * c))
                 for _ in range(n_stack)]
        ck, cb = init_uniform(rng, (c, c, 3, 3), 9 * c), init_uniform(rng, (c,), 9 * c)
        ok, ob = init_uniform(rng, (1, c, 3, 3), 9 * c), init_uniform(rng, (1,), 9 * c)
        return cls(pw, pb, stack, ck, cb, ok, ob)

    @property
    def channels(self) -> int:
        return self.point_w.shape[0]


def voxelize_frustum(cloud: RadarPointCloud, cam: CameraModel, grid: FrustumGrid,
                     p_max: int = 8, camera_index: int = 0) -> PillarCanvas:
    """Bin radar points into (depth bin, feature column) pillars of one camera.

    Points are dropped, with the reason counted, when behind the near plane,
    outside the image, outside the depth range, or when their pillar already
    holds ``p_max`` points (earlier points in input order win).
    """
    if p_max < 1:
        raise ValueError("p_max must be >= 1")
    canvas = PillarCanvas(camera_index, {})
    if len(cloud) == 0:
        return canvas
    pts = cloud.points
    u, v, d, front = project_points(cam, pts[:, :3])
    in_img = front & (u >= 0) & (u < cam.image_w) & (v >= 0) & (v < cam.image_h)
    d_bin, d_ok = grid.depth_bins(d)
    u_bin, u_ok = grid.column_bins(u)
    for i in range(len(pts)):
        if not front[i]:
            canvas.dropped["behind_plane"] += 1
            continue
        if not (in_img[i] and u_ok[i]):
            canvas.dropped["out_of_image"] += 1
            continue
        if not d_ok[i]:
            canvas.dropped["out_of_depth"] += 1
            continue
        key = (int(d_bin[i]), int(u_bin[i]))
        pillar = canvas.occupied.setdefault(key, [])
        if len(pillar) >= p_max:
            canvas.dropped["pillar_full"] += 1
            continue
        dd = (d[i] - grid.bin_center(key[0])) / grid.d_step
        du = (u[i] - grid.column_center(key[1])) / grid.stride
        pillar.append(np.array([dd, du, pts[i, 3], pts[i, 4], pts[i, 5]], dtype=F32))
        canvas.kept += 1
    return canvas


def scatter_pillars(canvas: PillarCanvas, w: RadarHeadWeights, grid: FrustumGrid) -> np.ndarray:
    """Pre-convolution canvas ``[C, D, W]``: ReLU(point MLP), max over each pillar."""
    if w.point_w.shape[1] != canvas.feature_dim:
        raise ShapeError(f"point MLP expects {w.point_w.shape[1]} inputs, canvas has {canvas.feature_dim}")
    out = np.zeros((w.channels, grid.d_bins, grid.feat_w), dtype=F32)
    for (db, ub), feats in canvas.occupied.items():
        h = relu(linear(np.stack(feats), w.point_w, w.point_b))
        out[:, db, ub] = h.max(axis=0)
    return out


def encode_pillars(canvas: PillarCanvas, w: RadarHeadWeights, grid: FrustumGrid) -> np.ndarray:
    x = scatter_pillars(canvas, w, grid)
    for k, b in w.stack:
        x = relu(conv2d(x, k, b))
    return x


def radar_heads(f_r: np.ndarray, w: RadarHeadWeights) -> tuple[np.ndarray, np.ndarray]:
    """Radar context ``[C,D,W]`` and occupancy ``[1,D,W]`` (sigmoid, not normalised over depth)."""
    return conv2d(f_r, w.context_k, w.context_b), sigmoid(conv2d(f_r, w.occ_k, w.occ_b))
