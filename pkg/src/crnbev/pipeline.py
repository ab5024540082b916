"""End-to-end forward pass: camera heads, radar encoder, view transform,
voxel pooling, feature aggregation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraHeadWeights, context_depth_heads, extract_features
from .geometry import BevGrid, FrustumGrid
from .mfa import MdcaConfig, MdcaWeights, MfaLayerWeights, mfa_forward
from .parallel import threads as thread_scope
from .radar import RadarHeadWeights, encode_pillars, radar_heads, voxelize_frustum
from .rvt import MODES as VT_MODES
from .rvt import BevFeatureBundle, FusionWeights, frustum_transform, voxel_pool_avg
from .scenegen import Scene, apply_sensor_drop
from .tensor import Rng, ShapeError, read_crnt, write_crnt

STAGES = ("camera", "radar", "rvt", "pooling", "mfa")
WEIGHTS_FORMAT = "crnbev-weights/1"


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    depth_bins: int = 112
    c_in: int = 16
    image_w: int = 704
    image_h: int = 256
    stride: int = 16
    n_cameras: int = 6
    heads: int = 8
    points: int = 4
    layers: int = 6
    n_k: int = 4096
    bev_size: int = 128
    bev_cell: float = 0.8
    bev_range: float = 51.2
    d_min: float = 2.0
    d_step: float = 0.5
    p_max: int = 8
    radar_stack: int = 2
    vt_mode: str = "radar_assisted"
    mfa_mode: str = "dense"
    depth_mode: str = "softmax"

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.image_w % self.stride or self.image_h % self.stride:
            raise ValueError("image size must be a multiple of the stride")
        if not np.isclose(self.bev_size * self.bev_cell, 2 * self.bev_range, rtol=1e-9, atol=0):
            raise ValueError(f"{self.bev_size} cells of {self.bev_cell} m do not span +-{self.bev_range} m")
        if self.vt_mode not in VT_MODES:
            raise ValueError(f"vt_mode must be one of {VT_MODES}")
        if self.mfa_mode not in ("dense", "sparse"):
            raise ValueError("mfa_mode must be dense or sparse")
        if self.depth_mode not in ("softmax", "sigmoid"):
            raise ValueError("depth_mode must be softmax or sigmoid")

    @classmethod
    def long_range(cls, **kw) -> "ModelConfig":
        """256x256 grid out to 102.4 m; depth bins extended at the same step."""
        base = dict(bev_size=256, bev_range=102.4, depth_bins=224)
        base.update(kw)
        return cls(**base)

    def frustum_grid(self) -> FrustumGrid:
        return FrustumGrid(self.image_w // self.stride, self.image_h // self.stride,
                           self.d_min, self.d_step, self.depth_bins, self.stride)

    def bev_grid(self) -> BevGrid:
        return BevGrid(self.bev_range, self.bev_cell)

    def mdca(self) -> MdcaConfig:
        return MdcaConfig(channels=self.channels, heads=self.heads, points=self.points,
                          layers=self.layers, n_k=self.n_k)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def canonical_json(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json()).hexdigest()


@dataclass
class PipelineWeights:
    camera: CameraHeadWeights
    radar: RadarHeadWeights
    fusion: FusionWeights
    mdca: MdcaWeights

    @classmethod
    def init(cls, seed: int, cfg: ModelConfig) -> "PipelineWeights":
        rng = Rng(seed)
        return cls(
            CameraHeadWeights.init(rng, cfg.c_in, cfg.channels, cfg.depth_bins),
            RadarHeadWeights.init(rng, cfg.channels, cfg.radar_stack),
            FusionWeights.init(rng, cfg.channels),
            MdcaWeights.init(rng, cfg.mdca()),
        )

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(self.camera.backbone):
            out[f"camera.backbone.{i}.k"], out[f"camera.backbone.{i}.b"] = k, b
        for name in ("context_k", "context_b", "depth_k", "depth_b"):
            out[f"camera.{name}"] = getattr(self.camera, name)
        out["radar.point_w"], out["radar.point_b"] = self.radar.point_w, self.radar.point_b
        for i, (k, b) in enumerate(self.radar.stack):
            out[f"radar.stack.{i}.k"], out[f"radar.stack.{i}.b"] = k, b
        for name in ("context_k", "context_b", "occ_k", "occ_b"):
            out[f"radar.{name}"] = getattr(self.radar, name)
        out["fusion.kernel"], out["fusion.bias"] = self.fusion.kernel, self.fusion.bias
        for name in ("ln_img_g", "ln_img_b", "ln_rad_g", "ln_rad_b", "wz", "bz"):
            out[f"mfa.{name}"] = getattr(self.mdca, name)
        for li, lw in enumerate(self.mdca.layers):
            for f in dataclasses.fields(MfaLayerWeights):
                out[f"mfa.layers.{li}.{f.name}"] = getattr(lw, f.name)
        return out

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensors = self.named_tensors()
        for name, t in tensors.items():
            write_crnt(d / f"{name}.crnt", t)
        manifest = {"format": WEIGHTS_FORMAT,
                    "tensors": {k: {"dims": list(v.shape), "layer": _layer_index(k)} for k, v in tensors.items()}}
        (d / "weights.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return d

    @classmethod
    def load(cls, directory, cfg: ModelConfig) -> "PipelineWeights":
        d = Path(directory)
        manifest = json.loads((d / "weights.json").read_text())
        if manifest.get("format") != WEIGHTS_FORMAT:
            raise ValueError(f"{d}: not a {WEIGHTS_FORMAT} directory")
        # a seeded instance supplies the structure; every tensor is then replaced
        w = cls.init(0, cfg)
        expected = w.named_tensors()
        if set(manifest["tensors"]) != set(expected):
            raise ShapeError(f"{d}: tensor set does not match the config")
        for name, ref in expected.items():
            t = read_crnt(d / f"{name}.crnt")
            if t.shape != ref.shape:
                raise ShapeError(f"{name}: stored {t.shape}, config needs {ref.shape}")
            ref[...] = t
        return w


def _layer_index(name: str) -> int | None:
    parts = name.split(".")
    return int(parts[2]) if parts[:2] == ["mfa", "layers"] else None


@dataclass
class RunResult:
    bev: np.ndarray                 # [C, X, Y]
    bundle: BevFeatureBundle
    timings: dict[str, float]       # seconds per stage
    total: float
    diagnostics: dict = field(default_factory=dict)


def check_scene(scene: Scene, cfg: ModelConfig) -> None:
    fg = cfg.frustum_grid()
    if len(scene.features) != cfg.n_cameras:
        raise ShapeError(f"scene has {len(scene.features)} cameras, config expects {cfg.n_cameras}")
    want = (cfg.c_in, fg.feat_h, fg.feat_w)
    for i, f in enumerate(scene.features):
        if f.shape != want:
            raise ShapeError(f"camera {i}: feature image {f.shape}, config expects {want}")
    for i, cam in enumerate(scene.cameras):
        if (cam.image_w, cam.image_h) != (cfg.image_w, cfg.image_h):
            raise ShapeError(f"camera {i}: image {cam.image_w}x{cam.image_h}, config expects "
                             f"{cfg.image_w}x{cfg.image_h}")


def run_scene(scene: Scene, weights: PipelineWeights, cfg: ModelConfig, drop_cameras=(),
              drop_radar: bool = False, mfa_mode: str | None = None, n_k: int | None = None,
              threads: int = 1, trace: list | None = None) -> RunResult:
    """Forward one scene. Raises ValueError when every sensor is dropped."""
    check_scene(scene, cfg)
    drop = sorted(set(int(i) for i in drop_cameras))
    if drop_radar and len(drop) == cfg.n_cameras:
        raise ValueError("all cameras and the radar are dropped: no input modality left")
    scene = apply_sensor_drop(scene, drop, drop_radar)
    mode = mfa_mode or cfg.mfa_mode
    fg, bg = cfg.frustum_grid(), cfg.bev_grid()
    cams = scene.cameras
    t = {}
    with thread_scope(threads):
        t0 = time.perf_counter()
        ctx, depth_conf, depths = [], [], []
        for img in scene.features:
            c, d = context_depth_heads(extract_features(img, weights.camera), weights.camera, cfg.depth_mode)
            ctx.append(c)
            depths.append(d)
            depth_conf.append(d.max(axis=1))
        t1 = time.perf_counter()
        r_ctx, occ, kept = [], [], 0
        for i, cam in enumerate(cams):
            canvas = voxelize_frustum(scene.radar, cam, fg, cfg.p_max, i)
            kept += canvas.kept
            rc, o = radar_heads(encode_pillars(canvas, weights.radar, fg), weights.radar)
            r_ctx.append(rc)
            occ.append(o)
        t2 = time.perf_counter()
        feats = [frustum_transform(ctx[i], depths[i], occ[i] if cfg.vt_mode == "radar_assisted" else None,
                                   weights.fusion, cfg.vt_mode) for i in range(len(cams))]
        t3 = time.perf_counter()
        bundle = voxel_pool_avg(feats, r_ctx, depth_conf, occ, cams, fg, bg)
        t4 = time.perf_counter()
        bev = mfa_forward(bundle, weights.mdca, cfg.mdca(), mode, n_k, trace)
        t5 = time.perf_counter()
    t = dict(zip(STAGES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3, t5 - t4)))
    diag = dict(bundle.diagnostics, radar_points_kept=kept, dropped_cameras=drop, radar_dropped=drop_radar,
                mfa_mode=mode)
    return RunResult(bev, bundle, t, t5 - t0, diag)
