import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from crnbev.geometry import BevGrid, CameraModel, FrustumGrid, bev_cell_of, default_rig, yaw_camera_extrinsic
from crnbev.rvt import FrustumFeature, FusionWeights, frustum_anchor_cells, frustum_transform, pool_cells, voxel_pool_avg
from crnbev.tensor import F32, Rng, ShapeError


def rand(seed, shape, lo=-1.0, hi=1.0):
    return Rng(seed).uniform(lo, hi, int(np.prod(shape))).reshape(shape).astype(F32)


def branches_by_loops(c_pv, d_i, o_r):
    c, h, w = c_pv.shape
    d = d_i.shape[0]
    a = np.zeros((c, d, w))
    b = np.zeros((c, d, w))
    for ci in range(c):
        for di in range(d):
            for hi in range(h):
                for wi in range(w):
                    a[ci, di, wi] += float(c_pv[ci, hi, wi]) * float(d_i[di, hi, wi])
                    b[ci, di, wi] += float(c_pv[ci, hi, wi]) * float(o_r[0, di, wi])
    return a, b


@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_frustum_transform_matches_loop_oracle(seed, c, d, h, w):
    c_pv, d_i, o_r = rand(seed, (c, h, w)), rand(seed + 1, (d, h, w), 0, 1), rand(seed + 2, (1, d, w), 0, 1)
    fw = FusionWeights.init(Rng(seed + 3), c)
    a, b = branches_by_loops(c_pv, d_i, o_r)
    ref = oracles.conv2d(np.concatenate([a, b]), fw.kernel, fw.bias)
    out = frustum_transform(c_pv, d_i, o_r, fw).context
    assert out.shape == (c, d, w)
    assert np.max(np.abs(out - ref)) <= 1e-6
    ref_lift = oracles.conv2d(a, fw.kernel[:, :c], fw.bias)
    assert np.max(np.abs(frustum_transform(c_pv, d_i, None, fw, "depth_only").context - ref_lift)) <= 1e-6


def test_zero_occupancy_equals_zeroed_radar_branch():
    c_pv, d_i = rand(1, (3, 2, 5)), rand(2, (4, 2, 5), 0, 1)
    fw = FusionWeights.init(Rng(3), 3)
    out = frustum_transform(c_pv, d_i, np.zeros((1, 4, 5), F32), fw).context
    a, _ = branches_by_loops(c_pv, d_i, np.zeros((1, 4, 5)))
    ref = oracles.conv2d(np.concatenate([a, np.zeros_like(a)]), fw.kernel, fw.bias)
    assert np.allclose(out, ref, atol=1e-6)


def test_one_hot_depth_selects_row():
    c, d, w = 2, 6, 5
    c_pv = rand(4, (c, 1, w), 0.5, 1.5)
    d_i = np.zeros((d, 1, w), F32)
    d_i[3] = 1
    k = np.zeros((c, 2 * c, 3, 3), F32)
    k[np.arange(c), np.arange(c), 1, 1] = 1  # identity on branch A only
    out = frustum_transform(c_pv, d_i, np.zeros((1, d, w), F32), FusionWeights(k, np.zeros(c, F32))).context
    rows = np.flatnonzero(np.abs(out).sum(axis=(0, 2)))
    assert list(rows) == [3]
    assert np.allclose(out[:, 3], c_pv[:, 0])


@given(st.integers(0, 1000), st.floats(-4, 4))
def test_linearity_without_bias(seed, alpha):
    c_pv, d_i, o_r = rand(seed, (3, 2, 4)), rand(seed + 1, (5, 2, 4), 0, 1), rand(seed + 2, (1, 5, 4), 0, 1)
    fw = FusionWeights.init(Rng(seed), 3)
    fw.bias = np.zeros_like(fw.bias)
    base = frustum_transform(c_pv, d_i, o_r, fw).context.astype(np.float64)
    scaled = frustum_transform((alpha * c_pv).astype(F32), d_i, o_r, fw).context
    assert np.allclose(scaled, alpha * base, atol=1e-5 * max(1, abs(alpha)))


def test_mode_and_shape_errors():
    fw = FusionWeights.init(Rng(0), 2)
    c_pv, d_i = rand(0, (2, 2, 3)), rand(1, (4, 2, 3), 0, 1)
    with pytest.raises(ValueError):
        frustum_transform(c_pv, d_i, None, fw)
    with pytest.raises(ValueError):
        frustum_transform(c_pv, d_i, None, fw, "lidar")
    with pytest.raises(ShapeError):
        frustum_transform(c_pv, d_i, np.zeros((1, 3, 3), F32), fw)
    with pytest.raises(ShapeError):
        frustum_transform(rand(0, (3, 2, 3)), d_i, None, fw, "depth_only")


# --- pooling ------------------------------------------------------------------


def test_mean_of_two():
    keys = np.array([[0, 0, 0], [0, 1, 0]])
    mean, peak, count = pool_cells(keys, np.array([5, 5]), np.array([[1.0], [3.0]], F32),
                                   np.array([[0.2], [0.7]], F32), 8)
    assert mean[5, 0] == 2.0 and peak[5, 0] == np.float32(0.7) and count[5] == 2
    assert count.sum() == 2 and not mean[np.arange(8) != 5].any()


def test_optical_axis_cell_placement():
    fgrid = FrustumGrid.for_image(704, 256)
    bgrid = BevGrid()
    cam = default_rig()[0]
    c = 2
    ctx = np.zeros((c, fgrid.d_bins, fgrid.feat_w), F32)
    d_bin = int((10 - fgrid.d_min) / fgrid.d_step)  # bin centre 10.25
    u_bin = int(cam.cx // fgrid.stride)
    ctx[:, d_bin, u_bin] = 1.0
    zeros = np.zeros_like(ctx)
    bundle = voxel_pool_avg([FrustumFeature(ctx)], [zeros], [np.zeros((fgrid.d_bins, fgrid.feat_w), F32)],
                            [None], [cam], fgrid, bgrid)
    hit = np.argwhere(bundle.C_I_bev[0] != 0)
    # column centre is 8 px right of cx, so the point drifts right (negative y) by 8/560 * depth
    assert [tuple(h) for h in hit] == [bev_cell_of(bgrid, 10.25, -10.25 * 8 / 560)] == [(76, 63)]


def test_anchor_cells_match_hand_oracle():
    fgrid = FrustumGrid.for_image(704, 256)
    bgrid = BevGrid()
    for cam in default_rig()[:3]:
        cells = frustum_anchor_cells(cam, fgrid, bgrid)
        for d in range(0, fgrid.d_bins, 7):
            for u in range(0, fgrid.feat_w, 5):
                ref = oracles.anchor_cell(cam, fgrid, bgrid, d, u)
                got = cells[d, u]
                assert got == (-1 if ref is None else ref[0] * bgrid.size_y + ref[1])


def small_instance(seed, n_cams=2, d=8, w=8, c=3):
    fgrid = FrustumGrid(d_min=2.0, d_step=5.0, d_bins=d, stride=16, feat_w=w, feat_h=1)
    bgrid = BevGrid(range_m=20.0, cell_m=4.0)
    rng = Rng(seed)
    cams = []
    for i in range(n_cams):
        k = np.array([[60.0, 0, w * 8], [0, 60.0, 8], [0, 0, 1]])
        cams.append(CameraModel(k, yaw_camera_extrinsic(float(rng.uniform(-np.pi, np.pi)), (0, 0, 1.5)), w * 16, 16))
    feats = [FrustumFeature(rand(seed + 10 + i, (c, d, w))) for i in range(n_cams)]
    radar = [rand(seed + 20 + i, (c, d, w)) for i in range(n_cams)]
    conf = [rand(seed + 30 + i, (d, w), 0, 1) for i in range(n_cams)]
    occ = [rand(seed + 40 + i, (1, d, w), 0, 1) for i in range(n_cams)]
    return feats, radar, conf, occ, cams, fgrid, bgrid


def group_by_oracle(feats, radar, cams, fgrid, bgrid):
    cells, img, rad = [], [], []
    for i, cam in enumerate(cams):
        for d in range(fgrid.d_bins):
            for u in range(fgrid.feat_w):
                cells.append(oracles.anchor_cell(cam, fgrid, bgrid, d, u))
                img.append(feats[i].context[:, d, u])
                rad.append(radar[i][:, d, u])
    return oracles.group_mean(cells, img), oracles.group_mean(cells, rad), cells


@given(st.integers(0, 100_000))
def test_pooling_matches_group_by_oracle(seed):
    feats, radar, conf, occ, cams, fgrid, bgrid = small_instance(seed)
    bundle = voxel_pool_avg(feats, radar, conf, occ, cams, fgrid, bgrid)
    img, rad, cells = group_by_oracle(feats, radar, cams, fgrid, bgrid)
    for ix in range(bgrid.size_x):
        for iy in range(bgrid.size_y):
            if (ix, iy) in img:
                assert np.max(np.abs(bundle.C_I_bev[:, ix, iy] - img[ix, iy])) <= 1e-6
                assert np.max(np.abs(bundle.C_R_bev[:, ix, iy] - rad[ix, iy])) <= 1e-6
            else:
                assert bundle.count[0, ix, iy] == 0 and not bundle.C_I_bev[:, ix, iy].any()
    in_grid = sum(c is not None for c in cells)
    assert bundle.count.sum() == in_grid
    assert bundle.diagnostics["dropped_cells"] == len(cells) - in_grid
    assert np.all((bundle.D_bev >= 0) & (bundle.D_bev <= 1) & (bundle.O_bev >= 0) & (bundle.O_bev <= 1))


@given(st.integers(0, 100_000))
def test_pool_cells_order_independent(seed):
    rng = np.random.default_rng(seed)
    n = 300
    keys = np.stack([rng.integers(0, 3, n), rng.integers(0, 50, n), rng.integers(0, 50, n)], axis=1)
    keys = np.unique(keys, axis=0)
    cells = rng.integers(-1, 10, len(keys))
    vals = rng.normal(size=(len(keys), 4)).astype(F32)
    peaks = rng.random((len(keys), 2)).astype(F32)
    a = pool_cells(keys, cells, vals, peaks, 10)
    p = rng.permutation(len(keys))
    b = pool_cells(keys[p], cells[p], vals[p], peaks[p], 10)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
