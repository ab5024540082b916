"""Multi-modal feature aggregation.

Queries are BEV cells. Each layer runs multi-modal deformable cross attention
(every head samples K points from each of the M = 2 modality maps, with
attention weights normalised jointly over all M*K slots), then a residual FFN.
The modality maps are static memory shared by every layer, so each query's
trajectory through the stack depends only on its own state. That is what
lets sparse mode reuse the dense computation cell for cell.

Layout: queries are rows, ``z`` is ``[N_q, C]``. Value maps are channel-last
``[M, X, Y, C]``. Reference points are normalised ``(x, y)`` cell centres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .parallel import apply_numba_threads
from .rvt import BevFeatureBundle
from .tensor import F32, Rng, ShapeError, init_uniform, layer_norm, linear, relu, softmax, top_k, transpose2d


@dataclass(frozen=True)
class MdcaConfig:
    channels: int = 64
    heads: int = 8
    modalities: int = 2
    points: int = 4
    layers: int = 6
    n_k: int = 4096
    ffn_mult: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.modalities != 2:
            raise ValueError("exactly two modalities (image, radar) are supported")
        for name in ("channels", "heads", "points", "layers", "n_k", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def slots(self) -> int:
        return self.heads * self.modalities * self.points


@dataclass
class MfaLayerWeights:
    offset_w: np.ndarray  # [H*M*K*2, C], offsets in BEV cells, (dx, dy) pairs
    offset_b: np.ndarray
    attn_w: np.ndarray    # [H*M*K, C]
    attn_b: np.ndarray
    value_w: np.ndarray   # [H, M, C_v, C], one projection per head and modality
    out_w: np.ndarray     # [C, H*C_v], head h owns columns h*C_v:(h+1)*C_v
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    ffn1_w: np.ndarray
    ffn1_b: np.ndarray
    ffn2_w: np.ndarray
    ffn2_b: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray

    @classmethod
    def init(cls, rng: Rng, cfg: MdcaConfig) -> "MfaLayerWeights":
        c, h, m, k, cv = cfg.channels, cfg.heads, cfg.modalities, cfg.points, cfg.head_dim
        hidden = cfg.ffn_mult * c
        ones, zeros = np.ones(c, F32), np.zeros(c, F32)
        return cls(
            offset_w=init_uniform(rng, (h * m * k * 2, c), c),
            offset_b=init_uniform(rng, (h * m * k * 2,), c),
            attn_w=init_uniform(rng, (h * m * k, c), c),
            attn_b=init_uniform(rng, (h * m * k,), c),
            value_w=init_uniform(rng, (h, m, cv, c), c),
            out_w=init_uniform(rng, (c, h * cv), h * cv),
            ln1_g=ones.copy(), ln1_b=zeros.copy(),
            ffn1_w=init_uniform(rng, (hidden, c), c),
            ffn1_b=init_uniform(rng, (hidden,), c),
            ffn2_w=init_uniform(rng, (c, hidden), hidden),
            ffn2_b=init_uniform(rng, (c,), hidden),
            ln2_g=ones.copy(), ln2_b=zeros.copy(),
        )


@dataclass
class MdcaWeights:
    ln_img_g: np.ndarray
    ln_img_b: np.ndarray
    ln_rad_g: np.ndarray
    ln_rad_b: np.ndarray
    wz: np.ndarray  # [C, 2C]
    bz: np.ndarray
    layers: list[MfaLayerWeights] = field(default_factory=list)

    @classmethod
    def init(cls, rng: Rng, cfg: MdcaConfig) -> "MdcaWeights":
        c = cfg.channels
        ones, zeros = np.ones(c, F32), np.zeros(c, F32)
        wz = init_uniform(rng, (c, 2 * c), 2 * c)
        bz = init_uniform(rng, (c,), 2 * c)
        layers = [MfaLayerWeights.init(rng, cfg) for _ in range(cfg.layers)]
        return cls(ones.copy(), zeros.copy(), ones.copy(), zeros.copy(), wz, bz, layers)


@dataclass
class QueryMap:
    z: np.ndarray      # [N_q, C]
    ref: np.ndarray    # [N_q, 2] normalised (x, y) cell centres in [0, 1]
    cells: np.ndarray  # [N_q] flat BEV index ix * Y + iy


def value_maps(bundle: BevFeatureBundle) -> np.ndarray:
    """Image and radar BEV context as channel-last ``[2, X, Y, C]``.

    Free when the bundle already stores its context that way.
    """
    if bundle.C_I_bev.shape != bundle.C_R_bev.shape:
        raise ShapeError("image and radar BEV maps must share a shape")
    if bundle.channels_last is not None:
        return bundle.channels_last
    c, sx, sy = bundle.C_I_bev.shape
    maps = np.empty((2, sx, sy, c), dtype=F32)
    for i, t in enumerate((bundle.C_I_bev, bundle.C_R_bev)):
        maps[i] = transpose2d(t.reshape(c, sx * sy)).reshape(sx, sy, c)
    return maps


def reference_points(size_x: int, size_y: int, cells: np.ndarray | None = None) -> np.ndarray:
    if cells is None:
        cells = np.arange(size_x * size_y)
    ix, iy = np.divmod(cells, size_y)
    return np.stack([(ix + 0.5) / size_x, (iy + 0.5) / size_y], axis=1)


# cells per layer-norm/projection chunk; keeps the normalised rows in L2
_PROJECT_CHUNK = 2048


def project_cells(maps: np.ndarray, w: MdcaWeights, eps: float = 1e-5) -> np.ndarray:
    """Query vectors ``[X*Y, C]`` from channel-last value maps."""
    _, sx, sy, c = maps.shape
    if w.wz.shape != (c, 2 * c):
        raise ShapeError(f"query projection must be [{c}, {2 * c}], got {w.wz.shape}")
    rows = maps.reshape(2, sx * sy, c)
    n = sx * sy
    z = np.empty((n, c), dtype=F32)
    normed = np.empty((_PROJECT_CHUNK, 2 * c), dtype=F32)
    for s in range(0, n, _PROJECT_CHUNK):
        e = min(s + _PROJECT_CHUNK, n)
        buf = normed[: e - s]
        layer_norm(rows[0, s:e], w.ln_img_g, w.ln_img_b, eps, out=buf[:, :c])
        layer_norm(rows[1, s:e], w.ln_rad_g, w.ln_rad_b, eps, out=buf[:, c:])
        z[s:e] = linear(buf, w.wz, w.bz)
    return z


def query_project(bundle: BevFeatureBundle, w: MdcaWeights, eps: float = 1e-5) -> QueryMap:
    """z_q = W_z [LN(image BEV); LN(radar BEV)] + b for every cell."""
    _, sx, sy = bundle.C_I_bev.shape
    z = project_cells(value_maps(bundle), w, eps)
    cells = np.arange(sx * sy)
    return QueryMap(z, reference_points(sx, sy, cells), cells)


@numba.njit(parallel=True, cache=True)
def _sample_aggregate(values, base, offsets, attn, out):
    # values [M, R, S, C] f32; base [N, 2] f64 pixel (row, col) of each query;
    # offsets [N, H, M, K, 2] f32 in cells; attn [N, H, M, K] f32;
    # out [N, H, M, C] f32.
    # out[q,h,m] = sum_k attn * bilinear(values[m], base + offset), zero off-map.
    n_q, n_h, n_m, n_k, _ = offsets.shape
    n_r, n_s, n_c = values.shape[1], values.shape[2], values.shape[3]
    for q in numba.prange(n_q):
        acc = np.empty(n_c, np.float64)
        for h in range(n_h):
            for m in range(n_m):
                acc[:] = 0.0
                for k in range(n_k):
                    r = base[q, 0] + np.float64(offsets[q, h, m, k, 0])
                    s = base[q, 1] + np.float64(offsets[q, h, m, k, 1])
                    if not (r >= 0.0 and r <= n_r - 1 and s >= 0.0 and s <= n_s - 1):
                        continue
                    r0 = int(math.floor(r))
                    s0 = int(math.floor(s))
                    fr = r - r0
                    fs = s - s0
                    a = np.float64(attn[q, h, m, k])
                    for dr in range(2):
                        wr = fr if dr else 1.0 - fr
                        rr = r0 + dr
                        if wr == 0.0 or rr >= n_r:
                            continue
                        for ds in range(2):
                            ws = fs if ds else 1.0 - fs
                            ss = s0 + ds
                            if ws == 0.0 or ss >= n_s:
                                continue
                            wgt = a * (wr * ws)
                            for c in range(n_c):
                                acc[c] += wgt * values[m, rr, ss, c]
                for c in range(n_c):
                    out[q, h, m, c] = acc[c]


def pixel_base(ref: np.ndarray, size_x: int, size_y: int) -> np.ndarray:
    """Denormalise reference points to pixel (row, col) on an X x Y map."""
    return np.stack([ref[:, 0] * size_x - 0.5, ref[:, 1] * size_y - 0.5], axis=1)


def mdca(q: QueryMap, maps: np.ndarray, lw: MfaLayerWeights, cfg: MdcaConfig,
         return_attention: bool = False):
    """Multi-modal deformable cross attention for every query in ``q``.

    Returns ``[N_q, C]`` (and the ``[N_q, H, M, K]`` attention weights when
    asked). Sampled vectors are attention-weighted and summed per (head,
    modality) before the value projection, which is linear so the order does
    not change the result beyond rounding.
    """
    n = q.z.shape[0]
    h, m, k, c, cv = cfg.heads, cfg.modalities, cfg.points, cfg.channels, cfg.head_dim
    if maps.shape[0] != m or maps.shape[3] != c:
        raise ShapeError(f"value maps must be [{m}, X, Y, {c}], got {maps.shape}")
    if q.z.shape[1] != c:
        raise ShapeError(f"queries must have {c} channels, got {q.z.shape[1]}")
    offsets = linear(q.z, lw.offset_w, lw.offset_b).reshape(n, h, m, k, 2)
    logits = linear(q.z, lw.attn_w, lw.attn_b).reshape(n, h, m * k)
    attn = softmax(logits, axis=-1).reshape(n, h, m, k)
    base = pixel_base(q.ref, maps.shape[1], maps.shape[2])
    agg = np.empty((n, h, m, c), dtype=F32)
    if n:
        apply_numba_threads()
        _sample_aggregate(maps, base, offsets, attn, agg)
    heads = np.empty((n, h * cv), dtype=F32)
    for hh in range(h):
        w_cat = lw.value_w[hh].transpose(1, 0, 2).reshape(cv, m * c)
        heads[:, hh * cv:(hh + 1) * cv] = linear(agg[:, hh].reshape(n, m * c), w_cat)
    out = linear(heads, lw.out_w)
    return (out, attn) if return_attention else out


# Queries per chunk; a multiple of the linear() row block. A chunk runs
# through every layer before the next starts, so the map neighbourhood it
# samples stays in cache for all layers.
_QUERY_CHUNK = 256


@dataclass
class LayerTrace:
    attention: np.ndarray  # [N_q, H, M, K]
    z: np.ndarray          # [N_q, C] layer output
    cells: np.ndarray      # [N_q] flat BEV index of each row


def _layer_rows(q: QueryMap, maps: np.ndarray, lw: MfaLayerWeights, cfg: MdcaConfig):
    att, a = mdca(q, maps, lw, cfg, return_attention=True)
    z = layer_norm(q.z + att, lw.ln1_g, lw.ln1_b, cfg.eps)
    ffn = linear(relu(linear(z, lw.ffn1_w, lw.ffn1_b)), lw.ffn2_w, lw.ffn2_b)
    return layer_norm(z + ffn, lw.ln2_g, lw.ln2_b, cfg.eps), a


def run_layers(q: QueryMap, maps: np.ndarray, layers: list[MfaLayerWeights], cfg: MdcaConfig,
               trace: list | None = None) -> QueryMap:
    """Apply ``layers`` in order to every query, chunk by chunk.

    Queries are independent given the static maps, so the chunking does not
    change any result. Appends one LayerTrace per layer when ``trace`` is given.
    """
    n = q.z.shape[0]
    z_out = np.empty_like(q.z)
    keep = trace is not None
    zs = [np.empty_like(q.z) for _ in layers] if keep else None
    attn = [np.empty((n, cfg.heads, cfg.modalities, cfg.points), F32) for _ in layers] if keep else None
    for s in range(0, n, _QUERY_CHUNK):
        e = min(s + _QUERY_CHUNK, n)
        part = QueryMap(q.z[s:e], q.ref[s:e], q.cells[s:e])
        for li, lw in enumerate(layers):
            z, a = _layer_rows(part, maps, lw, cfg)
            if keep:
                zs[li][s:e] = z
                attn[li][s:e] = a
            part = QueryMap(z, part.ref, part.cells)
        z_out[s:e] = part.z
    if keep:
        trace.extend(LayerTrace(a, z, q.cells) for a, z in zip(attn, zs))
    return QueryMap(z_out, q.ref, q.cells)


def mfa_layer(q: QueryMap, maps: np.ndarray, lw: MfaLayerWeights, cfg: MdcaConfig,
              trace: list | None = None) -> QueryMap:
    """z <- LN(z + mdca(z)); z <- LN(z + FFN(z)). Appends a LayerTrace when ``trace`` is given."""
    return run_layers(q, maps, [lw], cfg, trace)


def sparse_select(d_bev: np.ndarray, o_bev: np.ndarray, n_k: int) -> np.ndarray:
    """Flat indices of the ``n_k`` cells with highest max(depth, occupancy) confidence."""
    scores = np.maximum(d_bev, o_bev).ravel()
    if n_k > scores.size:
        raise ValueError(f"n_k={n_k} exceeds the {scores.size} BEV cells")
    return top_k(scores, n_k)


def mfa_forward(bundle: BevFeatureBundle, w: MdcaWeights, cfg: MdcaConfig, mode: str = "dense",
                n_k: int | None = None, trace: list | None = None) -> np.ndarray:
    """Fused BEV map ``[C, X, Y]``.

    Sparse mode refines only the top-``n_k`` cells; every other cell keeps its
    projected query value.
    """
    if mode not in ("dense", "sparse"):
        raise ValueError(f"unknown MFA mode {mode!r}")
    if len(w.layers) != cfg.layers:
        raise ShapeError(f"weights hold {len(w.layers)} layers, config expects {cfg.layers}")
    c, sx, sy = bundle.C_I_bev.shape
    maps = value_maps(bundle)
    z_all = project_cells(maps, w, cfg.eps)
    if mode == "dense":
        cells = np.arange(sx * sy)
        q = QueryMap(z_all, reference_points(sx, sy, cells), cells)
    else:
        idx = sparse_select(bundle.D_bev, bundle.O_bev, cfg.n_k if n_k is None else n_k)
        idx = np.sort(idx)  # raster order keeps map gathers local
        q = QueryMap(z_all[idx], reference_points(sx, sy, idx), idx)
    q = run_layers(q, maps, w.layers, cfg, trace)
    z = q.z
    if mode == "sparse":
        z = z_all
        z[q.cells] = q.z
    # [C, X, Y] view over cell-major rows
    return z.T.reshape(c, sx, sy)


def mdca_op_count(n_q: int, cfg: MdcaConfig) -> int:
    """Multiply-adds per layer in the sampling/aggregation core: N_q*H*M*K*4*C."""
    return n_q * cfg.heads * cfg.modalities * cfg.points * 4 * cfg.channels
