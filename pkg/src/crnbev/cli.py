"""``crnbev`` command line: gen-scene, run, bench, init-weights.

Exit codes: 0 success, 1 validation or argument error, 2 I/O error,
3 a requested check failed.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .tensor import F32, write_crnt

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3
SPARSE_TOL = 1e-6


class UsageError(Exception):
    pass


class CheckFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for I/O here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _weight_seed(args) -> int:
    env = os.environ.get("CRN_SEED")
    if env is not None:
        try:
            return int(env, 0)
        except ValueError:
            raise ValueError(f"CRN_SEED={env!r} is not an integer") from None
    return args.seed


def _model_config(args):
    from .pipeline import ModelConfig

    if args.config:
        cfg = ModelConfig.from_dict(json.loads(Path(args.config).read_text()))
    elif getattr(args, "long_range", False):
        cfg = ModelConfig.long_range()
    else:
        cfg = ModelConfig()
    over = {}
    if getattr(args, "mode", None):
        over["vt_mode"] = args.mode.replace("-", "_")
    if getattr(args, "sparse", False):
        over["mfa_mode"] = "sparse"
    if getattr(args, "nk", None) is not None:
        over["n_k"] = args.nk
    if getattr(args, "depth", None):
        over["depth_mode"] = args.depth
    return dataclasses.replace(cfg, **over) if over else cfg


def pgm_bytes(bev: np.ndarray) -> bytes:
    """8-bit binary PGM of the per-cell max over channels, min-max normalised.

    Image rows follow the BEV x index, columns the y index.
    """
    proj = np.asarray(bev, dtype=np.float64).max(axis=0)
    lo, hi = proj.min(), proj.max()
    img = np.zeros(proj.shape, dtype=np.uint8)
    if hi > lo:
        img = np.floor((proj - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)
    return f"P5\n{proj.shape[1]} {proj.shape[0]}\n255\n".encode() + img.tobytes()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    from .scenegen import SceneSpec, generate, save_scene

    spec = SceneSpec(seed=args.seed, n_boxes=args.boxes, box_range=args.box_range, dropout=args.dropout,
                     clutter_rate=args.clutter, range_sigma=args.range_sigma,
                     azimuth_sigma=args.azimuth_sigma, returns_per_box=args.returns_per_box)
    scene = generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    written = save_scene(scene, out)
    print(f"scene {out}: {len(scene.boxes)} boxes, {len(scene.visible)} camera sightings, "
          f"{len(scene.radar)} radar points ({scene.n_true_returns} from boxes), "
          f"{int(scene.gt_bev.sum())} occupied BEV cells, {len(written)} files")
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import PipelineWeights, run_scene
    from .scenegen import load_scene

    cfg = _model_config(args)
    scene = load_scene(args.scene)
    if args.weights:
        weights = PipelineWeights.load(args.weights, cfg)
        weight_src = {"directory": str(args.weights)}
    else:
        seed = _weight_seed(args)
        weights = PipelineWeights.init(seed, cfg)
        weight_src = {"seed": seed}
    drop = args.drop_cameras or []
    res = run_scene(scene, weights, cfg, drop, args.drop_radar, threads=args.threads)

    verify = None
    if args.verify_sparse:
        from .mfa import mfa_forward, sparse_select

        mcfg = cfg.mdca()
        other = "dense" if cfg.mfa_mode == "sparse" else "sparse"
        alt = mfa_forward(res.bundle, weights.mdca, mcfg, other)
        sel = sparse_select(res.bundle.D_bev, res.bundle.O_bev, cfg.n_k)
        a = res.bev.reshape(cfg.channels, -1)[:, sel]
        b = alt.reshape(cfg.channels, -1)[:, sel]
        diff = float(np.abs(a.astype(np.float64) - b).max())
        verify = {"selected_cells": int(sel.size), "max_abs_diff": diff, "tolerance": SPARSE_TOL,
                  "passed": diff <= SPARSE_TOL}
        print(f"verify-sparse: max |sparse - dense| over {sel.size} selected cells = {diff:.3e} "
              f"({'ok' if verify['passed'] else 'FAIL'}, tol {SPARSE_TOL:g})")

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bev_path, pgm_path, man_path = out / "bev.crnt", out / "bev.pgm", out / "manifest.json"
    write_crnt(bev_path, res.bev)
    pgm_path.write_bytes(pgm_bytes(res.bev))
    scene_path = Path(args.scene)
    doc = json.loads(scene_path.read_text())
    manifest = {
        "inputs": {"scene": str(scene_path),
                   "tensors": [str(scene_path.parent / n) for n in doc["feature_files"]],
                   "config": str(args.config) if args.config else None},
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "weights": weight_src,
        "threads": args.threads,
        "dropped_cameras": sorted(set(drop)),
        "radar_dropped": bool(args.drop_radar),
        "outputs": {"bev": str(bev_path), "pgm": str(pgm_path)},
        "output_shape": list(res.bev.shape),
        "stage_timings_ms": {k: v * 1e3 for k, v in res.timings.items()},
        "total_ms": res.total * 1e3,
        "diagnostics": res.diagnostics,
        "verify_sparse": verify,
    }
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {bev_path} {list(res.bev.shape)}, {pgm_path}, {man_path} in {res.total * 1e3:.0f} ms")
    if verify is not None and not verify["passed"]:
        raise CheckFailed("sparse and dense outputs disagree at selected cells")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import MIN_REPEATS, bench_mfa, bench_pipeline

    if args.repeats < MIN_REPEATS:
        raise ValueError(f"--repeats must be at least {MIN_REPEATS}")
    if args.pipeline:
        from .pipeline import PipelineWeights
        from .scenegen import load_scene

        cfg = _model_config(args)
        report = bench_pipeline(load_scene(args.pipeline), cfg, PipelineWeights.init(_weight_seed(args), cfg),
                                repeats=args.repeats, threads=args.threads)
    else:
        for g in args.grids:
            if g < 1:
                raise ValueError(f"grid size {g} must be positive")
        report = bench_mfa(args.grids, args.modes, n_k=args.nk, repeats=args.repeats,
                           seed=_weight_seed(args), threads=args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(report.to_json() + "\n")
    (out / "bench.csv").write_text(report.to_csv())
    for r in report.rows:
        print(f"{r.kind:6s} {r.name:9s} {r.grid_x:4d}x{r.grid_y:<4d} n_k={r.n_k:<6d} "
              f"median {r.median_ms:9.2f} ms  p10 {r.p10_ms:9.2f}  p90 {r.p90_ms:9.2f}")
    for c in report.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3f} "
              f"(band [{c['lo']}, {c['hi']}])")
    if args.assert_ and not report.passed:
        raise CheckFailed("scaling checks failed")
    return EXIT_OK


def cmd_init_weights(args) -> int:
    from .pipeline import PipelineWeights

    cfg = _model_config(args)
    d = PipelineWeights.init(_weight_seed(args), cfg).save(args.out)
    print(f"wrote weights to {d} (config {cfg.hash()[:12]})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crnbev", description="Camera-radar BEV feature pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--boxes", type=int, default=8)
    g.add_argument("--box-range", type=float, default=40.0)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--clutter", type=float, default=5.0, help="expected clutter points per scene")
    g.add_argument("--range-sigma", type=float, default=0.1)
    g.add_argument("--azimuth-sigma", type=float, default=0.005)
    g.add_argument("--returns-per-box", type=int, default=4)
    g.add_argument("--out", default="scene.json")
    g.set_defaults(func=cmd_gen_scene)

    def model_flags(sp):
        sp.add_argument("--config", help="model config JSON")
        sp.add_argument("--long-range", action="store_true", help="256x256 grid out to 102.4 m")
        sp.add_argument("--mode", choices=["radar-assisted", "depth-only"])
        sp.add_argument("--depth", choices=["softmax", "sigmoid"])
        sp.add_argument("--sparse", action="store_true")
        sp.add_argument("--nk", type=int)
        sp.add_argument("--seed", type=int, default=0, help="weight seed (CRN_SEED overrides)")
        sp.add_argument("--threads", type=int, default=1)

    r = sub.add_parser("run", help="run the pipeline on a scene")
    r.add_argument("--scene", required=True)
    r.add_argument("--out-dir", default="out")
    r.add_argument("--weights", help="weight directory from init-weights")
    r.add_argument("--drop-cameras", type=_int_list)
    r.add_argument("--drop-radar", action="store_true")
    r.add_argument("--verify-sparse", action="store_true")
    model_flags(r)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="time the aggregation stage or the pipeline")
    b.add_argument("--grids", type=_int_list, default=[64, 128, 256])
    b.add_argument("--modes", type=_str_list, default=["dense", "sparse"])
    b.add_argument("--repeats", type=int, default=7)
    b.add_argument("--pipeline", metavar="SCENE", help="benchmark run stages on this scene instead")
    b.add_argument("--out-dir", default="bench")
    b.add_argument("--assert", dest="assert_", action="store_true", help="exit 3 if a scaling band fails")
    model_flags(b)
    b.set_defaults(func=cmd_bench, nk=4096)

    w = sub.add_parser("init-weights", help="write seeded weights as CRNT tensors")
    w.add_argument("--out", required=True)
    model_flags(w)
    w.set_defaults(func=cmd_init_weights)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "threads", 1) < 1:
            raise ValueError("--threads must be >= 1")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
