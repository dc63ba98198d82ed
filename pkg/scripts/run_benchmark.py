"""Five-seed learning benchmark on the mismatched plant with a median summary.

    python scripts/run_benchmark.py [--config data/acceptance.ini] [--seeds 0,1,2,3,4] [--workers 1]
"""

import argparse
import statistics
import time
from pathlib import Path

from gpmpcc.config import load_config
from gpmpcc.experiment import lap_time_reduction, run_batch

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=str(ROOT / "data" / "acceptance.ini"))
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    cfg = load_config(args.config)
    out = Path(args.out or cfg.paths.output)
    seeds = [int(s) for s in args.seeds.split(",")]
    t0 = time.perf_counter()
    results = run_batch(cfg, seeds, out, workers=args.workers)
    reductions, err_cuts = [], []
    for seed, (metrics, err) in results.items():
        times = " ".join(f"{m.lap_time:6.2f}" for m in metrics)
        updates = " ".join(f"{m.dict_updates:3d}" for m in metrics)
        print(f"seed {seed}: times {times} | updates {updates}" + (f" | {err}" if err else ""))
        if not err and len(metrics) > 1:
            reductions.append(lap_time_reduction(metrics))
            last = metrics[-1]
            err_cuts.append(1 - last.e_vy_gp[0] / last.e_vy_nom[0])
    if reductions:
        print(f"median lap-time reduction {100 * statistics.median(reductions):.2f}%  "
              f"median e_vy cut by GP {100 * statistics.median(err_cuts):.1f}%")
    print(f"{time.perf_counter() - t0:.0f} s, outputs in {out}")


if __name__ == "__main__":
    main()
