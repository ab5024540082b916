"""Hand-crafted view-transform probe.

With a flat depth distribution the depth branch smears each pixel's context
evenly along its ray, so it carries no range information. Radar occupancy
that is one-hot at the target's depth bin concentrates the radar branch at a
single frustum row; after pooling, the strongest BEV cell should sit on the
target. In depth-only mode nothing singles that row out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BevGrid, FrustumGrid, bev_cell_of
from .rvt import FusionWeights, frustum_transform, voxel_pool_avg
from .scenegen import Scene, footprint_cells
from .tensor import F32


def identity_fusion(channels: int) -> FusionWeights:
    """3x3 fusion conv that adds the two branches at the centre tap."""
    k = np.zeros((channels, 2 * channels, 3, 3), dtype=F32)
    for c in range(channels):
        k[c, c, 1, 1] = 1.0
        k[c, channels + c, 1, 1] = 1.0
    return FusionWeights(k, np.zeros(channels, dtype=F32))


def target_occupancy(scene: Scene, fgrid: FrustumGrid, box: int = 0) -> list[np.ndarray]:
    """Per-camera ``[1, D, W]`` maps: 1 at the depth bin of the box centre, every column."""
    occ = [np.zeros((1, fgrid.d_bins, fgrid.feat_w), dtype=F32) for _ in scene.cameras]
    for vis in scene.visible:
        if vis.box != box:
            continue
        d_bin, ok = fgrid.depth_bins(vis.depth)
        if ok:
            occ[vis.camera][0, int(d_bin), :] = 1.0
    return occ


@dataclass
class LocalizationResult:
    argmax_cell: tuple[int, int]
    gt_cell: tuple[int, int] | None   # cell holding the box centre
    in_footprint: bool                # argmax lies on a cell the box overlaps
    peak: float

    @property
    def hit(self) -> bool:
        return self.argmax_cell == self.gt_cell


def localize(scene: Scene, mode: str = "radar_assisted", box: int = 0) -> LocalizationResult:
    spec = scene.spec
    fgrid, bgrid = spec.frustum_grid(), spec.bev_grid()
    c = spec.c_in
    fusion = identity_fusion(c)
    occ = target_occupancy(scene, fgrid, box)
    uniform = np.full((fgrid.d_bins, fgrid.feat_h, fgrid.feat_w), 1.0 / fgrid.d_bins, dtype=F32)
    # identity context head whose bias cancels the flat feature background
    context = [np.maximum(img - F32(spec.background), 0) for img in scene.features]
    feats = [frustum_transform(img, uniform, occ[i] if mode == "radar_assisted" else None, fusion, mode)
             for i, img in enumerate(context)]
    zeros = [np.zeros_like(f.context) for f in feats]
    conf = [uniform.max(axis=1) for _ in feats]
    bundle = voxel_pool_avg(feats, zeros, conf, occ, scene.cameras, fgrid, bgrid)
    mag = np.sqrt((bundle.C_I_bev.astype(np.float64) ** 2).sum(axis=0))
    flat = int(np.argmax(mag))
    cell = (flat // bgrid.size_y, flat % bgrid.size_y)
    b = scene.boxes[box]
    return LocalizationResult(cell, bev_cell_of(bgrid, b.x, b.y),
                              bool(footprint_cells(b, bgrid)[cell]), float(mag.max()))
