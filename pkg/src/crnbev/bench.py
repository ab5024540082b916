"""Timing harness for the aggregation stage and the full pipeline.

Every configuration gets warm-up calls that are not recorded, then R >= 5
timed repetitions on a monotonic clock. Repetitions are interleaved across
configurations (round robin) so slow drift on a shared machine spreads over
all of them instead of biasing whichever ran last.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .mfa import MdcaConfig, MdcaWeights, mfa_forward
from .parallel import threads as thread_scope
from .pipeline import STAGES, ModelConfig, PipelineWeights, run_scene
from .rvt import BevFeatureBundle
from .scenegen import Scene
from .tensor import F32, Rng

MIN_REPEATS = 5
# (mode, from-grid, to-grid) -> (lo, hi) on the median ratio
SCALING_BANDS = {
    ("dense", 128, 256): (3.5, 4.5),
    ("sparse", 128, 256): (0.0, 1.3),
}
SPEEDUP_GRID = 256
SPARSE_OVER_DENSE_MAX = 0.5


@dataclass
class BenchRow:
    kind: str            # "mfa", "stage" or "total"
    name: str            # mode for mfa rows, stage name otherwise
    grid_x: int
    grid_y: int
    n_k: int
    repeats: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    op_count: int
    peak_bytes: int
    threads: int
    output_sha256: str = ""


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    ratios: list[dict] = field(default_factory=list)
    checks: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        d = json.loads(text)
        return cls([BenchRow(**r) for r in d["rows"]], d["ratios"], d["checks"], d["meta"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in dataclasses.fields(BenchRow)]
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(dataclasses.asdict(r))
        return buf.getvalue()

    def row(self, kind: str, name: str, grid: int | None = None) -> BenchRow:
        for r in self.rows:
            if r.kind == kind and r.name == name and (grid is None or r.grid_x == grid):
                return r
        raise KeyError((kind, name, grid))

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


def summarize(samples_s) -> tuple[float, float, float]:
    """(median, p10, p90) in milliseconds."""
    ms = np.asarray(samples_s, dtype=np.float64) * 1e3
    return float(np.median(ms)), float(np.percentile(ms, 10)), float(np.percentile(ms, 90))


def mfa_op_count(n_cells: int, n_q: int, cfg: MdcaConfig) -> int:
    """Multiply-adds of one forward pass: query projection over every cell,
    then per refined query and layer the offset/attention heads, bilinear
    sampling, value and output projections and the FFN."""
    c, h, m, k = cfg.channels, cfg.heads, cfg.modalities, cfg.points
    hidden = cfg.ffn_mult * c
    per_query = (c * h * m * k * 3           # offsets (2) + attention logits (1)
                 + h * m * k * 4 * c         # bilinear taps over C channels
                 + h * cfg.head_dim * m * c  # per-head value projection
                 + c * c                     # output projection
                 + 2 * c * hidden)           # FFN
    return n_cells * 2 * c * c + n_q * cfg.layers * per_query


def mfa_peak_bytes(n_cells: int, n_q: int, cfg: MdcaConfig) -> int:
    """Rough resident float32 footprint: value maps, projected queries, and one layer's buffers."""
    c, h, m, k = cfg.channels, cfg.heads, cfg.modalities, cfg.points
    maps = 2 * n_cells * c
    queries = n_cells * c + 2 * n_cells * c // 16  # z plus the projection chunk
    layer = n_q * (h * m * k * 3 + h * m * c + 2 * c + cfg.ffn_mult * c)
    return 4 * (maps + queries + layer)


def random_bundle(size_x: int, size_y: int, channels: int, seed: int) -> BevFeatureBundle:
    rng = Rng(seed)
    n = size_x * size_y
    maps = (2.0 * rng.random(2 * n * channels) - 1.0).astype(F32).reshape(2, size_x, size_y, channels)
    d = rng.random(n).astype(F32).reshape(1, size_x, size_y)
    o = rng.random(n).astype(F32).reshape(1, size_x, size_y)
    return BevFeatureBundle.from_channels_last(maps, d, o, np.ones((1, size_x, size_y), F32))


def _digest(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype=F32).tobytes()).hexdigest()


def _time_round_robin(jobs, repeats: int, warmup: int):
    """Run each job ``warmup`` times untimed, then ``repeats`` timed rounds."""
    outputs = [None] * len(jobs)
    for i, job in enumerate(jobs):
        for _ in range(warmup):
            outputs[i] = job()
    samples = [[] for _ in jobs]
    for _ in range(repeats):
        for i, job in enumerate(jobs):
            t = time.perf_counter()
            outputs[i] = job()
            samples[i].append(time.perf_counter() - t)
    return samples, outputs


def bench_mfa(grids, modes=("dense", "sparse"), n_k: int = 4096, repeats: int = 7, warmup: int = 1,
              seed: int = 0, cfg: MdcaConfig | None = None, threads: int = 1) -> BenchReport:
    """Time ``mfa_forward`` on random bundles for every (grid, mode)."""
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}")
    grids = [(g, g) if isinstance(g, int) else tuple(g) for g in grids]
    for m in modes:
        if m not in ("dense", "sparse"):
            raise ValueError(f"unknown mode {m!r}")
    cfg = cfg or MdcaConfig(n_k=n_k)
    weights = MdcaWeights.init(Rng(seed), cfg)
    bundles = {g: random_bundle(g[0], g[1], cfg.channels, seed + 1) for g in grids}
    configs, jobs = [], []
    for g in grids:
        for m in modes:
            nk = min(n_k, g[0] * g[1]) if m == "sparse" else g[0] * g[1]
            configs.append((g, m, nk))
            jobs.append(lambda g=g, m=m, nk=nk: mfa_forward(bundles[g], weights, cfg, m, nk))
    with thread_scope(threads):
        samples, outputs = _time_round_robin(jobs, repeats, warmup)
    report = BenchReport(meta={"bench": "mfa", "seed": seed, "threads": threads, "warmup": warmup,
                               "clock": "perf_counter", "config": dataclasses.asdict(cfg)})
    for (g, m, nk), s, out in zip(configs, samples, outputs):
        med, p10, p90 = summarize(s)
        n_cells = g[0] * g[1]
        report.rows.append(BenchRow("mfa", m, g[0], g[1], nk if m == "sparse" else 0, repeats, med, p10, p90,
                                    mfa_op_count(n_cells, nk, cfg), mfa_peak_bytes(n_cells, nk, cfg),
                                    threads, _digest(out)))
    for m in modes:
        rows = [r for r in report.rows if r.name == m]
        for a, b in zip(rows, rows[1:]):
            report.ratios.append({"mode": m, "from": a.grid_x, "to": b.grid_x, "ratio": b.median_ms / a.median_ms})
    report.checks = scaling_checks(report)
    return report


def scaling_checks(report: BenchReport) -> list[dict]:
    """Evaluate every scaling band whose configurations are present in the report."""
    checks = []
    for (mode, g0, g1), (lo, hi) in SCALING_BANDS.items():
        for r in report.ratios:
            if r["mode"] == mode and r["from"] == g0 and r["to"] == g1:
                v = r["ratio"]
                checks.append({"name": f"{mode} median ratio {g0}^2 -> {g1}^2", "value": v,
                               "lo": lo, "hi": hi, "passed": bool(lo <= v <= hi)})
    try:
        s = report.row("mfa", "sparse", SPEEDUP_GRID).median_ms
        d = report.row("mfa", "dense", SPEEDUP_GRID).median_ms
    except KeyError:
        return checks
    checks.append({"name": f"sparse / dense median at {SPEEDUP_GRID}^2", "value": s / d,
                   "lo": 0.0, "hi": SPARSE_OVER_DENSE_MAX, "passed": bool(s / d <= SPARSE_OVER_DENSE_MAX)})
    return checks


def bench_pipeline(scene: Scene, cfg: ModelConfig, weights: PipelineWeights | None = None,
                   repeats: int = 5, warmup: int = 1, threads: int = 1, seed: int = 0) -> BenchReport:
    """Per-stage and end-to-end timings of ``run_scene``."""
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}")
    weights = weights or PipelineWeights.init(seed, cfg)
    for _ in range(warmup):
        run_scene(scene, weights, cfg, threads=threads)
    stage_s = {s: [] for s in STAGES}
    totals, digests = [], set()
    for _ in range(repeats):
        t = time.perf_counter()
        res = run_scene(scene, weights, cfg, threads=threads)
        totals.append(time.perf_counter() - t)
        for s in STAGES:
            stage_s[s].append(res.timings[s])
        digests.add(_digest(res.bev))
    gx, gy = cfg.bev_size, cfg.bev_size
    nk = cfg.n_k if cfg.mfa_mode == "sparse" else gx * gy
    report = BenchReport(meta={"bench": "pipeline", "threads": threads, "warmup": warmup, "seed": seed,
                               "clock": "perf_counter", "config": cfg.to_dict(),
                               "outputs_identical": len(digests) == 1})
    mcfg = cfg.mdca()
    for s in STAGES:
        med, p10, p90 = summarize(stage_s[s])
        ops = mfa_op_count(gx * gy, nk, mcfg) if s == "mfa" else 0
        report.rows.append(BenchRow("stage", s, gx, gy, cfg.n_k if cfg.mfa_mode == "sparse" else 0, repeats,
                                    med, p10, p90, ops, 0, threads))
    med, p10, p90 = summarize(totals)
    report.rows.append(BenchRow("total", "pipeline", gx, gy, cfg.n_k if cfg.mfa_mode == "sparse" else 0,
                                repeats, med, p10, p90, 0, mfa_peak_bytes(gx * gy, nk, mcfg), threads,
                                digests.pop() if len(digests) == 1 else ""))
    stage_sum = sum(r.median_ms for r in report.rows if r.kind == "stage")
    report.checks.append({"name": "stage medians sum vs end-to-end median", "value": stage_sum / med,
                          "lo": 0.9, "hi": 1.1, "passed": bool(0.9 <= stage_sum / med <= 1.1)})
    return report
