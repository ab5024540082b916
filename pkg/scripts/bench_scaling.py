"""Dense vs sparse aggregation timings across BEV grid sizes.

    python scripts/bench_scaling.py --grids 64,128,256 --repeats 9 --out-dir bench
"""
import argparse
from pathlib import Path

from crnbev.bench import bench_mfa


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grids", default="64,128,256")
    ap.add_argument("--nk", type=int, default=4096)
    ap.add_argument("--repeats", type=int, default=9)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--out-dir", default="bench")
    args = ap.parse_args()
    grids = [int(g) for g in args.grids.split(",")]
    report = bench_mfa(grids, n_k=args.nk, repeats=args.repeats, threads=args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scaling.json").write_text(report.to_json() + "\n")
    (out / "scaling.csv").write_text(report.to_csv())
    print(f"{'mode':7s} {'grid':>7s} {'median ms':>10s} {'p10':>9s} {'p90':>9s} {'MACs':>14s}")
    for r in report.rows:
        print(f"{r.name:7s} {r.grid_x:>4d}^2 {r.median_ms:10.1f} {r.p10_ms:9.1f} {r.p90_ms:9.1f} {r.op_count:14,d}")
    for r in report.ratios:
        print(f"{r['mode']:7s} {r['from']}^2 -> {r['to']}^2: x{r['ratio']:.2f}")
    for c in report.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3f} in [{c['lo']}, {c['hi']}]")


if __name__ == "__main__":
    main()
