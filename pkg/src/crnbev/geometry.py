"""Pinhole cameras, rigid transforms, and the frustum / BEV discretisations.

Conventions: ego frame is x forward, y left, z up. Camera frame is +Z along the
optical axis, +X right, +Y down. All binning uses half-open intervals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class BehindNearPlaneError(ValueError):
    """Point lies at or behind the camera's near plane."""


def rigid(rotation: np.ndarray, translation) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = rotation
    T[:3, 3] = translation
    return T


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R, t = T[:3, :3], T[:3, 3]
    return rigid(R.T, -R.T @ t)


def yaw_camera_extrinsic(yaw: float, position=(0.0, 0.0, 1.5)) -> np.ndarray:
    """cam_from_ego for a level camera looking along ego heading ``yaw``."""
    c, s = math.cos(yaw), math.sin(yaw)
    R = np.array([
        [s, -c, 0.0],    # camera +X (right) in ego coordinates
        [0.0, 0.0, -1.0],  # camera +Y (down)
        [c, s, 0.0],     # camera +Z (forward)
    ])
    return rigid(R, -R @ np.asarray(position, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class CameraModel:
    intrinsics: np.ndarray
    cam_from_ego: np.ndarray
    image_w: int
    image_h: int
    z_near: float = 0.1

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.cam_from_ego, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "cam_from_ego", T)
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("intrinsics must be upper-triangular with bottom row (0,0,1)")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("extrinsic rotation must be orthonormal with det 1")
        if not np.allclose(T[3], [0, 0, 0, 1]):
            raise ValueError("extrinsic bottom row must be (0,0,0,1)")

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (np.array_equal(self.intrinsics, other.intrinsics)
                and np.array_equal(self.cam_from_ego, other.cam_from_ego)
                and (self.image_w, self.image_h, self.z_near) == (other.image_w, other.image_h, other.z_near))

    __hash__ = object.__hash__

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def ego_from_cam(self) -> np.ndarray:
        return invert_rigid(self.cam_from_ego)

    def to_dict(self) -> dict:
        return {
            "intrinsics": [float(v) for v in self.intrinsics.ravel()],
            "cam_from_ego": [float(v) for v in self.cam_from_ego.ravel()],
            "image_w": int(self.image_w),
            "image_h": int(self.image_h),
            "z_near": float(self.z_near),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        if len(d["intrinsics"]) != 9 or len(d["cam_from_ego"]) != 16:
            raise ValueError("camera needs 9 intrinsics and 16 extrinsic values")
        return cls(np.array(d["intrinsics"]), np.array(d["cam_from_ego"]),
                   int(d["image_w"]), int(d["image_h"]), float(d.get("z_near", 0.1)))


def default_rig(n: int = 6, image_w: int = 704, image_h: int = 256, focal: float = 560.0,
                height: float = 1.5) -> list[CameraModel]:
    """Surround rig: ``n`` level cameras at yaw multiples of 360/n degrees."""
    K = np.array([[focal, 0, image_w / 2], [0, focal, image_h / 2], [0, 0, 1.0]])
    return [
        CameraModel(K, yaw_camera_extrinsic(2 * math.pi * i / n, (0.0, 0.0, height)), image_w, image_h)
        for i in range(n)
    ]


def project_ego_point(cam: CameraModel, p) -> tuple[float, float, float, bool]:
    """Project an ego-frame point. Returns ``(u, v, depth, in_view)``."""
    pc = cam.cam_from_ego @ np.append(np.asarray(p, dtype=np.float64), 1.0)
    X, Y, Z = pc[:3]
    if Z <= cam.z_near:
        raise BehindNearPlaneError(f"camera-frame depth {Z:.4g} <= z_near {cam.z_near}")
    u = cam.fx * X / Z + cam.intrinsics[0, 1] * Y / Z + cam.cx
    v = cam.fy * Y / Z + cam.cy
    in_view = 0.0 <= u < cam.image_w and 0.0 <= v < cam.image_h
    return float(u), float(v), float(Z), bool(in_view)


def project_points(cam: CameraModel, pts: np.ndarray):
    """Vectorised projection of ego points ``[N,3]``.

    Returns ``(u, v, d, front)`` where ``front`` marks points beyond the near
    plane; u and v are only meaningful where ``front`` holds.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    pc = pts @ cam.cam_from_ego[:3, :3].T + cam.cam_from_ego[:3, 3]
    Z = pc[:, 2]
    front = Z > cam.z_near
    Zs = np.where(front, Z, 1.0)
    u = cam.fx * pc[:, 0] / Zs + cam.intrinsics[0, 1] * pc[:, 1] / Zs + cam.cx
    v = cam.fy * pc[:, 1] / Zs + cam.cy
    return u, v, Z, front


def unproject_pixel(cam: CameraModel, u: float, v: float, d: float) -> np.ndarray:
    """Ego-frame point at pixel (u, v) and camera depth d."""
    if d <= cam.z_near:
        raise ValueError(f"depth {d} must exceed z_near {cam.z_near}")
    return unproject_pixels(cam, np.array([u]), np.array([v]), np.array([d]))[0]


def unproject_pixels(cam: CameraModel, u, v, d) -> np.ndarray:
    u, v, d = (np.asarray(a, dtype=np.float64) for a in (u, v, d))
    Y = (v - cam.cy) / cam.fy * d
    X = (u - cam.cx - cam.intrinsics[0, 1] * Y / d) / cam.fx * d
    pc = np.stack([X, Y, d], axis=-1)
    R, t = cam.cam_from_ego[:3, :3], cam.cam_from_ego[:3, 3]
    return (pc - t) @ R


def _half_open_index(x, lo: float, step: float, n: int):
    """floor((x - lo)/step), corrected so bin i is exactly [lo+i*step, lo+(i+1)*step)."""
    x = np.asarray(x, dtype=np.float64)
    i = np.floor((x - lo) / step).astype(np.int64)
    i = np.where(lo + (i + 1) * step <= x, i + 1, i)
    i = np.where(lo + i * step > x, i - 1, i)
    valid = (i >= 0) & (i < n) & np.isfinite(x)
    return np.where(valid, i, -1), valid


@dataclass(frozen=True)
class FrustumGrid:
    feat_w: int
    feat_h: int
    d_min: float = 2.0
    d_step: float = 0.5
    d_bins: int = 112
    stride: int = 16

    @classmethod
    def for_image(cls, image_w: int, image_h: int, d_min: float = 2.0, d_max: float = 58.0,
                  d_step: float = 0.5, stride: int = 16) -> "FrustumGrid":
        if image_w % stride or image_h % stride:
            raise ValueError(f"image {image_w}x{image_h} not divisible by stride {stride}")
        bins = int(round((d_max - d_min) / d_step))
        return cls(image_w // stride, image_h // stride, d_min, d_step, bins, stride)

    @property
    def d_max(self) -> float:
        return self.d_min + self.d_bins * self.d_step

    def bin_center(self, d_bin):
        return self.d_min + (np.asarray(d_bin) + 0.5) * self.d_step

    def column_center(self, u_bin):
        return (np.asarray(u_bin) + 0.5) * self.stride

    def depth_bins(self, d):
        return _half_open_index(d, self.d_min, self.d_step, self.d_bins)

    def column_bins(self, u):
        return _half_open_index(u, 0.0, float(self.stride), self.feat_w)


def depth_to_bin(grid: FrustumGrid, d: float) -> int | None:
    """Depth bin index, or None outside [d_min, d_max)."""
    i, ok = grid.depth_bins(d)
    return int(i) if ok else None


@dataclass(frozen=True)
class BevGrid:
    range_m: float = 51.2
    cell_m: float = 0.8
    size_x: int = field(default=0)
    size_y: int = field(default=0)

    def __post_init__(self):
        n = int(round(2 * self.range_m / self.cell_m))
        if not math.isclose(n * self.cell_m, 2 * self.range_m, rel_tol=1e-9):
            raise ValueError("range must be a whole number of cells")
        for name in ("size_x", "size_y"):
            if getattr(self, name) == 0:
                object.__setattr__(self, name, n)
            elif getattr(self, name) != n:
                raise ValueError(f"{name}={getattr(self, name)} inconsistent with range/cell ({n})")

    @classmethod
    def square(cls, size: int, cell_m: float = 0.8) -> "BevGrid":
        return cls(range_m=size * cell_m / 2, cell_m=cell_m)

    @property
    def n_cells(self) -> int:
        return self.size_x * self.size_y

    def cells_of(self, x, y):
        ix, okx = _half_open_index(x, -self.range_m, self.cell_m, self.size_x)
        iy, oky = _half_open_index(y, -self.range_m, self.cell_m, self.size_y)
        ok = okx & oky
        return np.where(ok, ix, -1), np.where(ok, iy, -1), ok

    def centers(self):
        """Cell-centre coordinates, each ``[size_x, size_y]``."""
        xs = -self.range_m + (np.arange(self.size_x) + 0.5) * self.cell_m
        ys = -self.range_m + (np.arange(self.size_y) + 0.5) * self.cell_m
        return np.meshgrid(xs, ys, indexing="ij")


def bev_cell_of(grid: BevGrid, x: float, y: float) -> tuple[int, int] | None:
    ix, iy, ok = grid.cells_of(x, y)
    return (int(ix), int(iy)) if ok else None


def bev_cell_center(grid: BevGrid, ix: int, iy: int) -> tuple[float, float]:
    if not (0 <= ix < grid.size_x and 0 <= iy < grid.size_y):
        raise ValueError(f"cell ({ix}, {iy}) outside {grid.size_x}x{grid.size_y} grid")
    return (-grid.range_m + (ix + 0.5) * grid.cell_m, -grid.range_m + (iy + 0.5) * grid.cell_m)
