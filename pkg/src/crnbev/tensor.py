"""Dense float32 tensor primitives.

Tensors are plain ``numpy.ndarray`` objects with dtype float32 and C-contiguous
(row-major) layout. Every op here is a pure function. Convolution, normalisation and
sampling accumulate in float64; ``linear`` uses float32 BLAS on fixed-size
row blocks.
"""
from __future__ import annotations

import math
import struct
from pathlib import Path

import numba
import numpy as np

from .parallel import apply_numba_threads

F32 = np.float32

# Rows per BLAS call in `linear`. Every call sees exactly this many rows, so a
# row's result never depends on how many other rows share the batch.
ROW_BLOCK = 256

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

CRNT_MAGIC = b"CRNT"


class ShapeError(ValueError):
    """Raised when operand dimensions are inconsistent."""


def as_tensor(x) -> np.ndarray:
    # ascontiguousarray would promote rank 0 to rank 1
    a = np.asarray(x, dtype=F32)
    return a if a.flags.c_contiguous else a.copy(order="C")


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# --------------------------------------------------------------------------
# Random numbers
# --------------------------------------------------------------------------


class Rng:
    """splitmix64 stream.

    The generator is counter based, so blocks of outputs are produced with
    vectorised uint64 arithmetic and are identical to drawing one at a time.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def u64(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + k * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return z

    def random(self, n: int | None = None):
        """Uniform doubles in [0, 1) from the top 53 bits."""
        if n is None:
            return (self.next_u64() >> 11) * 2.0**-53
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def uniform(self, lo: float, hi: float, n: int | None = None):
        u = self.random(n)
        return lo + (hi - lo) * u

    def normal(self, n: int | None = None):
        """Standard normals by Box-Muller (two uniforms per draw)."""
        m = 1 if n is None else n
        u = self.random(2 * m)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return float(z[0]) if n is None else z

    def poisson(self, lam: float) -> int:
        # Knuth's multiplication method; the clutter rates used here are small.
        if lam <= 0:
            return 0
        limit = np.exp(-lam)
        k, p = 0, 1.0
        while True:
            p *= self.random()
            if p <= limit:
                return k
            k += 1


def init_uniform(rng: Rng, dims, fan_in: int) -> np.ndarray:
    """Weights i.i.d. uniform in (-a, a), a = sqrt(1/fan_in), filled row-major."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    dims = tuple(int(d) for d in dims)
    n = int(np.prod(dims)) if dims else 1
    a = np.sqrt(1.0 / fan_in)
    v = ((2.0 * rng.random(n) - 1.0) * a).astype(F32)
    # u == 0 and float32 rounding can land on the boundary; step inside it
    edge = np.nextafter(F32(a), F32(0))
    while edge >= a:
        edge = np.nextafter(edge, F32(0))
    v = np.clip(v, -edge, edge)
    return v.reshape(dims)


# --------------------------------------------------------------------------
# Elementwise and reductions
# --------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, F32(0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out.astype(F32)


@numba.njit(parallel=True, cache=True)
def _softmax_rows(x, out):
    n, c = x.shape
    for i in numba.prange(n):
        m = -np.inf
        for j in range(c):
            m = max(m, np.float64(x[i, j]))
        tot = 0.0
        for j in range(c):
            tot += math.exp(x[i, j] - m)
        for j in range(c):
            out[i, j] = math.exp(x[i, j] - m) / tot


# Reassociation lets LLVM vectorise the float64 reductions. Every row runs the
# same compiled loop whatever its position or batch, so results stay
# reproducible row for row.
@numba.njit(parallel=True, cache=True, fastmath={"reassoc", "nsz", "contract"})
def _layer_norm_rows(x, gain, shift, eps, out):
    n, c = x.shape
    for i in numba.prange(n):
        s = 0.0
        for j in range(c):
            s += np.float64(x[i, j])
        mean = s / c
        v = 0.0
        for j in range(c):
            d = np.float64(x[i, j]) - mean
            v += d * d
        inv = 1.0 / math.sqrt(v / c + eps)
        for j in range(c):
            out[i, j] = (x[i, j] - mean) * inv * gain[j] + shift[j]


@numba.njit(parallel=True, cache=True)
def _transpose_blocked(x, out, write_major):
    # Inner loop runs along whichever side has the power-of-two-ish long
    # stride, so the other side streams; avoids cache-set aliasing.
    n, m = x.shape
    tile = 32
    for bi in numba.prange((n + tile - 1) // tile):
        i0 = bi * tile
        i1 = min(i0 + tile, n)
        for j0 in range(0, m, tile):
            j1 = min(j0 + tile, m)
            if write_major:
                for j in range(j0, j1):
                    for i in range(i0, i1):
                        out[j, i] = x[i, j]
            else:
                for i in range(i0, i1):
                    for j in range(j0, j1):
                        out[j, i] = x[i, j]


def transpose2d(x: np.ndarray) -> np.ndarray:
    """Contiguous transpose of a 2-D array (cache-blocked)."""
    x = np.ascontiguousarray(x)
    out = np.empty((x.shape[1], x.shape[0]), dtype=x.dtype)
    if x.size:
        apply_numba_threads()
        _transpose_blocked(x, out, x.shape[0] > x.shape[1])
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax, accumulated in float64 one slice at a time."""
    x = np.asarray(x, dtype=F32)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {x.ndim}")
    moved = np.moveaxis(x, axis, -1)
    rows = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
    out = np.empty_like(rows)
    if rows.size:
        apply_numba_threads()
        _softmax_rows(rows, out)
    return np.ascontiguousarray(np.moveaxis(out.reshape(moved.shape), -1, axis))


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float = 1e-5,
               out: np.ndarray | None = None) -> np.ndarray:
    """Normalise each position over the last axis, then scale and shift.

    ``out`` may be a (possibly strided) 2-D view to write rows into.
    """
    c = x.shape[-1]
    _check(gain.shape == (c,) and shift.shape == (c,), f"layer_norm params must be ({c},)")
    rows = np.ascontiguousarray(x, dtype=F32).reshape(-1, c)
    if out is not None:
        _check(out.shape == rows.shape, f"layer_norm out must be {rows.shape}")
        if rows.size:
            apply_numba_threads()
            _layer_norm_rows(rows, gain.astype(np.float64), shift.astype(np.float64), float(eps), out)
        return out
    out = np.empty_like(rows)
    if rows.size:
        apply_numba_threads()
        _layer_norm_rows(rows, gain.astype(np.float64), shift.astype(np.float64), float(eps), out)
    return out.reshape(x.shape)


# --------------------------------------------------------------------------
# Linear maps
# --------------------------------------------------------------------------


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Affine map over the last axis: ``x @ weight.T + bias``.

    Rows are pushed through BLAS in zero-padded blocks of ``ROW_BLOCK`` so
    each output row is bit-identical whatever batch it arrives in.
    """
    _check(weight.ndim == 2, "weight must be 2-D [C_out, C_in]")
    c_out, c_in = weight.shape
    _check(x.shape[-1] == c_in, f"linear: input last dim {x.shape[-1]} != C_in {c_in}")
    if bias is not None:
        _check(bias.shape == (c_out,), f"linear: bias must be ({c_out},)")
    lead = x.shape[:-1]
    rows = x.reshape(-1, c_in)
    n = rows.shape[0]
    wt = np.ascontiguousarray(np.asarray(weight, dtype=F32).T)
    out = np.empty((n, c_out), dtype=F32)
    block = np.zeros((ROW_BLOCK, c_in), dtype=F32)
    res = np.empty((ROW_BLOCK, c_out), dtype=F32)
    for s in range(0, n, ROW_BLOCK):
        e = min(s + ROW_BLOCK, n)
        if e - s == ROW_BLOCK and rows.flags.c_contiguous:
            np.matmul(rows[s:e], wt, out=out[s:e])
            continue
        block[: e - s] = rows[s:e]
        block[e - s :] = 0.0
        np.matmul(block, wt, out=res)
        out[s:e] = res[: e - s]
    if bias is not None:
        out += np.asarray(bias, dtype=F32)
    return out.reshape(*lead, c_out)


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation, stride 1, zero padding 1: [C_in,H,W] -> [C_out,H,W]."""
    _check(x.ndim == 3, f"conv2d input must be [C_in,H,W], got {x.shape}")
    _check(kernel.ndim == 4 and kernel.shape[2:] == (3, 3), f"conv2d kernel must be [C_out,C_in,3,3], got {kernel.shape}")
    c_out, c_in = kernel.shape[:2]
    _check(x.shape[0] == c_in, f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    _check(bias.shape == (c_out,), f"conv2d: bias must be ({c_out},)")
    _, h, w = x.shape
    padded = np.zeros((c_in, h + 2, w + 2), dtype=np.float64)
    padded[:, 1:-1, 1:-1] = x
    # im2col rows ordered (c_in, ky, kx) to match the kernel's flat layout
    cols = np.empty((c_in, 3, 3, h, w), dtype=np.float64)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = padded[:, ky : ky + h, kx : kx + w]
    k = np.asarray(kernel, dtype=np.float64).reshape(c_out, c_in * 9)
    out = k @ cols.reshape(c_in * 9, h * w) + np.asarray(bias, dtype=np.float64)[:, None]
    return out.astype(F32).reshape(c_out, h, w)


# --------------------------------------------------------------------------
# Sampling and selection
# --------------------------------------------------------------------------


def bilinear_sample(fmap: np.ndarray, x: float, y: float) -> np.ndarray:
    """Sample ``fmap[C,H,W]`` at column ``x`` and row ``y`` (pixel units).

    Points outside [0, W-1] x [0, H-1] return zeros.
    """
    c, h, w = fmap.shape
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        return np.zeros(c, dtype=F32)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    acc = np.zeros(c, dtype=np.float64)
    for yy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            wgt = wy * wx
            if wgt != 0.0 and yy < h and xx < w:
                acc += wgt * fmap[:, yy, xx]
    return acc.astype(F32)


def top_k(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, descending; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    if not 1 <= k <= n:
        raise ValueError(f"top_k needs 1 <= k <= {n}, got k={k}")
    if k == n:
        cand = np.arange(n)
    else:
        # everything strictly above the k-th largest value, then the
        # lowest-index entries equal to it
        kth = np.partition(values, n - k)[n - k]
        above = np.flatnonzero(values > kth)
        ties = np.flatnonzero(values == kth)[: k - above.size]
        cand = np.concatenate([above, ties])
    order = np.lexsort((cand, -values[cand]))
    return cand[order].astype(np.int64)


# --------------------------------------------------------------------------
# CRNT binary format
# --------------------------------------------------------------------------


def crnt_bytes(t: np.ndarray) -> bytes:
    t = as_tensor(t)
    head = CRNT_MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return head + t.astype("<f4").tobytes(order="C")


def write_crnt(path, t: np.ndarray) -> None:
    Path(path).write_bytes(crnt_bytes(t))


def parse_crnt(buf: bytes) -> np.ndarray:
    if buf[:4] != CRNT_MAGIC:
        raise ValueError("not a CRNT tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    if len(buf) - off != 4 * n:
        raise ValueError(f"CRNT payload has {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(F32).reshape(dims)


def read_crnt(path) -> np.ndarray:
    return parse_crnt(Path(path).read_bytes())
