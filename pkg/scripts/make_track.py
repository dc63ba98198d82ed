"""Write the benchmark track centerline and the default vehicle parameters to data/."""

import argparse
from pathlib import Path

from gpmpcc.track import benchmark_track, save_centerline
from gpmpcc.vehicle import TireParams, VehicleParams, dump_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    track = benchmark_track()
    save_centerline(track, out / "benchmark_track.csv")
    (out / "vehicle.params").write_text(dump_params(VehicleParams(), TireParams()))
    print(f"track length {track.theta_max:.2f} m, {len(track.theta)} samples -> {out}")


if __name__ == "__main__":
    main()
