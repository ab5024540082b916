"""Seeded synthetic driving scenes.

A scene is a handful of boxes on the ground plane. Each box that is visible
to a camera paints a Gaussian blob into that camera's stride-16 feature
image, with amplitude falling off as 1/depth. Radar returns sit on the face
of each box nearest the ego origin, perturbed in range and azimuth, thinned
by dropout, and mixed with Poisson clutter.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BevGrid, CameraModel, FrustumGrid, default_rig, project_points
from .radar import RadarPointCloud
from .tensor import F32, Rng, read_crnt, write_crnt

SCENE_FORMAT = "crnbev-scene/1"


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float    # lateral extent
    l: float    # along-heading extent
    h: float
    yaw: float
    rcs: float

    def corners(self) -> np.ndarray:
        """Footprint corners ``[4, 2]`` counter-clockwise in the ego XY plane."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2, self.w / 2
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_boxes: int = 8
    box_range: float = 40.0       # |x|, |y| bound for box centres
    min_distance: float = 4.0     # keeps boxes off the ego vehicle
    cameras: tuple[CameraModel, ...] = field(default_factory=lambda: tuple(default_rig()))
    c_in: int = 16
    stride: int = 16
    d_min: float = 2.0
    d_step: float = 0.5
    d_bins: int = 112
    bev_range: float = 51.2
    bev_cell: float = 0.8
    range_sigma: float = 0.1      # m
    azimuth_sigma: float = 0.005  # rad
    dropout: float = 0.1
    clutter_rate: float = 5.0     # expected clutter points per scene
    returns_per_box: int = 4
    radar_height: float = 1.0
    blob_amplitude: float = 10.0
    blob_sigma: float = 1.0       # feature pixels
    background: float = 0.1

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0.0 <= self.dropout <= 1.0:
            raise ValueError(f"dropout probability {self.dropout} outside [0, 1]")
        for name in ("n_boxes", "returns_per_box"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("range_sigma", "azimuth_sigma", "clutter_rate", "blob_amplitude"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative")
        if self.blob_sigma <= 0 or self.c_in < 1 or not self.cameras:
            raise ValueError("blob_sigma, c_in and camera count must be positive")
        if not 0 < self.box_range <= self.bev_range:
            raise ValueError(f"box_range {self.box_range} must lie in (0, bev_range={self.bev_range}]")
        if self.min_distance >= self.box_range:
            raise ValueError("min_distance must be below box_range")
        self.frustum_grid()
        self.bev_grid()

    def frustum_grid(self) -> FrustumGrid:
        cam = self.cameras[0]
        if any((c.image_w, c.image_h) != (cam.image_w, cam.image_h) for c in self.cameras):
            raise ValueError("all cameras must share one image size")
        if cam.image_w % self.stride or cam.image_h % self.stride:
            raise ValueError(f"image {cam.image_w}x{cam.image_h} not divisible by stride {self.stride}")
        return FrustumGrid(cam.image_w // self.stride, cam.image_h // self.stride,
                           self.d_min, self.d_step, self.d_bins, self.stride)

    def bev_grid(self) -> BevGrid:
        return BevGrid(self.bev_range, self.bev_cell)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["cameras"] = [c.to_dict() for c in self.cameras]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scene spec fields: {sorted(unknown)}")
        d = dict(d)
        if "cameras" in d:
            d["cameras"] = tuple(CameraModel.from_dict(c) for c in d["cameras"])
        return cls(**d)


@dataclass(frozen=True)
class Visibility:
    box: int
    camera: int
    u: float
    v: float
    depth: float


@dataclass
class Scene:
    spec: SceneSpec
    boxes: list[Box]
    features: list[np.ndarray]   # per camera [C_in, feat_h, feat_w]
    radar: RadarPointCloud
    gt_bev: np.ndarray           # [1, X, Y], 0/1
    visible: list[Visibility]
    n_true_returns: int = 0

    @property
    def cameras(self) -> list[CameraModel]:
        return list(self.spec.cameras)


# --------------------------------------------------------------------------
# generation
# --------------------------------------------------------------------------


def _sample_boxes(rng: Rng, spec: SceneSpec) -> list[Box]:
    boxes = []
    while len(boxes) < spec.n_boxes:
        x = rng.uniform(-spec.box_range, spec.box_range)
        y = rng.uniform(-spec.box_range, spec.box_range)
        w, l, h = rng.uniform(1.6, 2.2), rng.uniform(3.5, 5.0), rng.uniform(1.4, 2.0)
        yaw = rng.uniform(-math.pi, math.pi)
        rcs = rng.uniform(1.0, 10.0)
        if math.hypot(x, y) >= spec.min_distance:
            boxes.append(Box(x, y, w, l, h, yaw, rcs))
    return boxes


def _box_signature(rng: Rng, c_in: int) -> np.ndarray:
    return rng.uniform(0.5, 1.5, c_in)


def _paint(spec: SceneSpec, grid: FrustumGrid, boxes, signatures):
    feats = [np.full((spec.c_in, grid.feat_h, grid.feat_w), spec.background, dtype=np.float64)
             for _ in spec.cameras]
    visible = []
    rows = np.arange(grid.feat_h)[:, None]
    cols = np.arange(grid.feat_w)[None, :]
    for bi, box in enumerate(boxes):
        centre = np.array([[box.x, box.y, box.h / 2]])
        for ci, cam in enumerate(spec.cameras):
            u, v, d, front = project_points(cam, centre)
            u, v, d = float(u[0]), float(v[0]), float(d[0])
            if not (front[0] and 0 <= u < cam.image_w and 0 <= v < cam.image_h
                    and grid.d_min <= d < grid.d_max):
                continue
            visible.append(Visibility(bi, ci, u, v, d))
            # feature pixel j covers image columns [j*s, (j+1)*s)
            fu = u / grid.stride - 0.5
            fv = v / grid.stride - 0.5
            g = np.exp(-((cols - fu) ** 2 + (rows - fv) ** 2) / (2 * spec.blob_sigma ** 2))
            feats[ci] += (spec.blob_amplitude / d) * signatures[bi][:, None, None] * g[None]
    return [f.astype(F32) for f in feats], visible


def _near_face(box: Box) -> tuple[np.ndarray, np.ndarray]:
    corners = box.corners()
    edges = [(corners[i], corners[(i + 1) % 4]) for i in range(4)]
    dist = [float(np.hypot(*((a + b) / 2))) for a, b in edges]
    return edges[int(np.argmin(dist))]


def _radar(rng: Rng, spec: SceneSpec, boxes) -> tuple[np.ndarray, int]:
    pts = []
    for box in boxes:
        a, b = _near_face(box)
        for _ in range(spec.returns_per_box):
            t = rng.random()
            px, py = a + t * (b - a)
            r = math.hypot(px, py) + spec.range_sigma * rng.normal()
            az = math.atan2(py, px) + spec.azimuth_sigma * rng.normal()
            rcs = box.rcs * rng.uniform(0.8, 1.2)
            # always draw, so the stream does not depend on the outcome
            dropped = rng.random() < spec.dropout
            if not dropped and r > 0:
                pts.append([r * math.cos(az), r * math.sin(az), spec.radar_height, rcs, 0.0, 0.0])
    n_true = len(pts)
    for _ in range(rng.poisson(spec.clutter_rate)):
        r = rng.uniform(1.0, spec.bev_range)
        az = rng.uniform(-math.pi, math.pi)
        pts.append([r * math.cos(az), r * math.sin(az), spec.radar_height, rng.uniform(0.0, 1.0), 0.0, 0.0])
    return np.array(pts, dtype=np.float64).reshape(-1, 6), n_true


def _rect_hits_cell(corners: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> bool:
    """Separating-axis test: does the convex footprint overlap the open cell with positive area?"""
    if corners[:, 0].max() <= x0 or corners[:, 0].min() >= x1:
        return False
    if corners[:, 1].max() <= y0 or corners[:, 1].min() >= y1:
        return False
    cell = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    for i in range(len(corners)):
        e = corners[(i + 1) % len(corners)] - corners[i]
        n = np.array([-e[1], e[0]])
        p, q = corners @ n, cell @ n
        if p.max() <= q.min() or q.max() <= p.min():
            return False
    return True


def footprint_cells(box: Box, grid: BevGrid) -> np.ndarray:
    """Boolean ``[X, Y]`` mask of cells the box footprint overlaps."""
    mask = np.zeros((grid.size_x, grid.size_y), dtype=bool)
    corners = box.corners()
    lo = np.floor((corners.min(axis=0) + grid.range_m) / grid.cell_m).astype(int)
    hi = np.floor((corners.max(axis=0) + grid.range_m) / grid.cell_m).astype(int)
    for ix in range(max(lo[0], 0), min(hi[0], grid.size_x - 1) + 1):
        x0 = -grid.range_m + ix * grid.cell_m
        for iy in range(max(lo[1], 0), min(hi[1], grid.size_y - 1) + 1):
            y0 = -grid.range_m + iy * grid.cell_m
            if _rect_hits_cell(corners, x0, y0, x0 + grid.cell_m, y0 + grid.cell_m):
                mask[ix, iy] = True
    return mask


def generate(spec: SceneSpec) -> Scene:
    rng = Rng(spec.seed)
    grid, bev = spec.frustum_grid(), spec.bev_grid()
    boxes = _sample_boxes(rng, spec)
    signatures = [_box_signature(rng, spec.c_in) for _ in boxes]
    features, visible = _paint(spec, grid, boxes, signatures)
    points, n_true = _radar(rng, spec, boxes)
    gt = np.zeros((bev.size_x, bev.size_y), dtype=bool)
    for box in boxes:
        gt |= footprint_cells(box, bev)
    return Scene(spec, boxes, features, RadarPointCloud(points), gt[None].astype(F32), visible, n_true)


def apply_sensor_drop(scene: Scene, drop_cameras=(), drop_radar: bool = False) -> Scene:
    """Zero the listed cameras' feature images and optionally empty the radar cloud."""
    n = len(scene.features)
    drop = set()
    for i in drop_cameras:
        if isinstance(i, bool) or not isinstance(i, (int, np.integer)) or not 0 <= i < n:
            raise ValueError(f"camera index {i!r} outside 0..{n - 1}")
        drop.add(int(i))
    feats = [np.zeros_like(f) if i in drop else f for i, f in enumerate(scene.features)]
    radar = RadarPointCloud() if drop_radar else scene.radar
    return dataclasses.replace(scene, features=feats, radar=radar)


# --------------------------------------------------------------------------
# files: JSON scene description plus CRNT feature images and gt map
# --------------------------------------------------------------------------


def _tensor_paths(path: Path, n_cams: int) -> tuple[list[Path], Path]:
    stem = path.with_suffix("")
    return [Path(f"{stem}.cam{i}.crnt") for i in range(n_cams)], Path(f"{stem}.gt.crnt")


def scene_document(scene: Scene, path) -> dict:
    path = Path(path)
    cams, gt = _tensor_paths(path, len(scene.features))
    return {
        "format": SCENE_FORMAT,
        "spec": scene.spec.to_dict(),
        "boxes": [dataclasses.asdict(b) for b in scene.boxes],
        "visible": [dataclasses.asdict(v) for v in scene.visible],
        "radar": {"fields": ["x", "y", "z", "rcs", "doppler", "sweep_age"],
                  "points": scene.radar.points.tolist(), "n_true_returns": scene.n_true_returns},
        "feature_files": [p.name for p in cams],
        "gt_file": gt.name,
    }


def save_scene(scene: Scene, path) -> list[Path]:
    """Write the scene file and its tensors next to it; returns every path written."""
    path = Path(path)
    doc = scene_document(scene, path)
    cams, gt = _tensor_paths(path, len(scene.features))
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    for p, f in zip(cams, scene.features):
        write_crnt(p, f)
    write_crnt(gt, scene.gt_bev)
    return [path, *cams, gt]


def load_scene(path) -> Scene:
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("format") != SCENE_FORMAT:
        raise ValueError(f"{path}: not a {SCENE_FORMAT} file")
    spec = SceneSpec.from_dict(doc["spec"])
    feats = [read_crnt(path.parent / name) for name in doc["feature_files"]]
    gt = read_crnt(path.parent / doc["gt_file"])
    return Scene(
        spec,
        [Box(**b) for b in doc["boxes"]],
        feats,
        RadarPointCloud(np.array(doc["radar"]["points"], dtype=np.float64).reshape(-1, 6)),
        gt,
        [Visibility(**v) for v in doc["visible"]],
        int(doc["radar"].get("n_true_returns", 0)),
    )
