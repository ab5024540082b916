"""Radar-assisted view transformation and average voxel pooling into BEV."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BevGrid, CameraModel, FrustumGrid, unproject_pixels
from .tensor import F32, Rng, ShapeError, conv2d, init_uniform

MODES = ("radar_assisted", "depth_only")


@dataclass
class FusionWeights:
    kernel: np.ndarray  # [C, 2C, 3, 3]; input channels = [depth branch; radar branch]
    bias: np.ndarray

    @classmethod
    def init(cls, rng: Rng, channels: int) -> "FusionWeights":
        fan = 9 * 2 * channels
        return cls(init_uniform(rng, (channels, 2 * channels, 3, 3), fan), init_uniform(rng, (channels,), fan))


@dataclass
class FrustumFeature:
    context: np.ndarray  # [C, D, W], height collapsed
    mode: str = "radar_assisted"


@dataclass
class BevFeatureBundle:
    C_I_bev: np.ndarray  # [C, X, Y]
    C_R_bev: np.ndarray
    D_bev: np.ndarray    # [1, X, Y]
    O_bev: np.ndarray
    count: np.ndarray
    diagnostics: dict = field(default_factory=dict)
    # [2, X, Y, C] storage the two context maps view into, when built that way
    channels_last: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_channels_last(cls, maps: np.ndarray, d_bev, o_bev, count, diagnostics=None):
        """Wrap cell-major ``[2, X, Y, C]`` context; C_I_bev / C_R_bev become views."""
        maps = np.ascontiguousarray(maps, dtype=F32)
        if maps.ndim != 4 or maps.shape[0] != 2:
            raise ShapeError(f"expected [2, X, Y, C], got {maps.shape}")
        return cls(maps[0].transpose(2, 0, 1), maps[1].transpose(2, 0, 1), d_bev, o_bev, count,
                   diagnostics or {}, maps)

    def tensors(self) -> dict[str, np.ndarray]:
        return {"C_I_bev": self.C_I_bev, "C_R_bev": self.C_R_bev, "D_bev": self.D_bev,
                "O_bev": self.O_bev, "count": self.count}


def lift_branches(c_pv: np.ndarray, d_i: np.ndarray, o_r: np.ndarray | None):
    """Height-collapsed outer products.

    depth branch: sum_h C(c,h,w) * D(d,h,w)        -> [C, D, W]
    radar branch: (sum_h C(c,h,w)) * O(d,w)        -> [C, D, W]
    """
    if c_pv.ndim != 3 or d_i.ndim != 3 or c_pv.shape[1:] != d_i.shape[1:]:
        raise ShapeError(f"context {c_pv.shape} and depth {d_i.shape} must share [H, W]")
    c64 = c_pv.astype(np.float64)
    depth = np.einsum("chw,dhw->cdw", c64, d_i.astype(np.float64))
    if o_r is None:
        return depth, None
    n_d, w = d_i.shape[0], d_i.shape[2]
    if o_r.shape != (1, n_d, w):
        raise ShapeError(f"occupancy must be (1, {n_d}, {w}), got {o_r.shape}")
    radar = np.einsum("cw,dw->cdw", c64.sum(axis=1), o_r[0].astype(np.float64))
    return depth, radar


def frustum_transform(c_pv: np.ndarray, d_i: np.ndarray, o_r: np.ndarray | None,
                      w: FusionWeights, mode: str = "radar_assisted") -> FrustumFeature:
    """Fuse depth- and radar-lifted context, then a 3x3 conv over (d, u).

    In ``depth_only`` mode the radar branch is left out (plain lift).
    """
    if mode not in MODES:
        raise ValueError(f"unknown view-transform mode {mode!r}")
    c = c_pv.shape[0]
    if w.kernel.shape[:2] != (c, 2 * c):
        raise ShapeError(f"fusion kernel must be [{c}, {2 * c}, 3, 3], got {w.kernel.shape}")
    if mode == "depth_only":
        depth, _ = lift_branches(c_pv, d_i, None)
        return FrustumFeature(conv2d(depth, w.kernel[:, :c], w.bias), mode)
    if o_r is None:
        raise ValueError("radar-assisted mode needs an occupancy map")
    depth, radar = lift_branches(c_pv, d_i, o_r)
    return FrustumFeature(conv2d(np.concatenate([depth, radar]), w.kernel, w.bias), mode)


def frustum_anchor_cells(cam: CameraModel, fgrid: FrustumGrid, bgrid: BevGrid) -> np.ndarray:
    """Flat BEV cell index of every frustum cell ``(d, u)``, -1 when off-grid.

    A cell sits at its bin-centre depth on the ray through its column centre
    and the principal row.
    """
    d_c = fgrid.bin_center(np.arange(fgrid.d_bins))
    u_c = fgrid.column_center(np.arange(fgrid.feat_w))
    dd, uu = np.meshgrid(d_c, u_c, indexing="ij")
    pts = unproject_pixels(cam, uu, np.full_like(uu, cam.cy), dd)
    ix, iy, ok = bgrid.cells_of(pts[..., 0], pts[..., 1])
    return np.where(ok, ix * bgrid.size_y + iy, -1)


def pool_cells(keys: np.ndarray, cell: np.ndarray, mean_vals: np.ndarray, max_vals: np.ndarray,
               n_cells: int):
    """Group frustum cells by BEV cell: mean of ``mean_vals``, max of ``max_vals``.

    ``keys`` are ``(camera, d, u)`` triples; cells are accumulated in that
    lexicographic order whatever order they arrive in, so results are
    bit-reproducible. Returns ``(mean [n_cells, A], max [n_cells, B], count)``.
    """
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    cell = cell[order]
    keep = cell >= 0
    cell = cell[keep]
    mv = mean_vals[order][keep].astype(np.float64)
    xv = max_vals[order][keep]
    total = np.zeros((n_cells, mv.shape[1]), dtype=np.float64)
    np.add.at(total, cell, mv)
    count = np.bincount(cell, minlength=n_cells)
    mean = np.zeros_like(total)
    hit = count > 0
    mean[hit] = total[hit] / count[hit, None]
    peak = np.zeros((n_cells, xv.shape[1]), dtype=F32)
    np.maximum.at(peak, cell, xv)
    return mean.astype(F32), peak, count


def voxel_pool_avg(features: list[FrustumFeature], radar_context: list[np.ndarray],
                   depth_conf: list[np.ndarray], occupancy: list[np.ndarray | None],
                   cams: list[CameraModel], fgrid: FrustumGrid, bgrid: BevGrid) -> BevFeatureBundle:
    """Average-pool per-camera frustum features into one BEV grid.

    ``depth_conf`` is each camera's depth map collapsed over image rows
    (``[D, W]``); it and occupancy are pooled by max, context by mean.
    """
    n = len(cams)
    if not (len(features) == len(radar_context) == len(depth_conf) == len(occupancy) == n):
        raise ShapeError("per-camera inputs must all have one entry per camera")
    c = features[0].context.shape[0]
    per_cam = fgrid.d_bins * fgrid.feat_w
    keys, cells, means, maxes = [], [], [], []
    for i, cam in enumerate(cams):
        ctx = features[i].context
        if ctx.shape != (c, fgrid.d_bins, fgrid.feat_w) or radar_context[i].shape != ctx.shape:
            raise ShapeError(f"camera {i}: frustum features must be {(c, fgrid.d_bins, fgrid.feat_w)}")
        d, u = np.meshgrid(np.arange(fgrid.d_bins), np.arange(fgrid.feat_w), indexing="ij")
        keys.append(np.stack([np.full(per_cam, i), d.ravel(), u.ravel()], axis=1))
        cells.append(frustum_anchor_cells(cam, fgrid, bgrid).ravel())
        means.append(np.concatenate([ctx.reshape(c, -1), radar_context[i].reshape(c, -1)]).T)
        occ = occupancy[i][0] if occupancy[i] is not None else np.zeros((fgrid.d_bins, fgrid.feat_w), F32)
        maxes.append(np.stack([depth_conf[i].ravel(), occ.ravel()], axis=1))
    cells_all = np.concatenate(cells)
    mean, peak, count = pool_cells(np.concatenate(keys), cells_all, np.concatenate(means),
                                   np.concatenate(maxes).astype(F32), bgrid.n_cells)
    shape = (bgrid.size_x, bgrid.size_y)
    maps = mean.reshape(*shape, 2, c).transpose(2, 0, 1, 3)
    return BevFeatureBundle.from_channels_last(
        maps,
        np.ascontiguousarray(peak[:, 0].reshape(1, *shape)),
        np.ascontiguousarray(peak[:, 1].reshape(1, *shape)),
        count.astype(F32).reshape(1, *shape),
        {"frustum_cells": int(cells_all.size), "dropped_cells": int((cells_all < 0).sum())},
    )
