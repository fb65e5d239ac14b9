"""Peak counts of the mode-occupation distributions along exact trajectories.

    python3 scripts/cat_states.py [--horizon 60] [--seeds 2] [--geometries odd dm rgb rgbg]

Prints, per geometry and mode, the number of peaks of P(N_m) at each sample
(one digit per unit time), using the same smoothing as the acceptance check.
"""
import argparse

from weakmeas import batch, geometry as geo, trajectory as tr
from weakmeas.analysis import count_peaks

GEOMETRIES = {"odd": (geo.odd_sites, 200, 100), "dm": (geo.diffraction_minimum, 200, 100),
              "rgb": (geo.rgb, 198, 99), "rgbg": (geo.rgbg, 200, 99)}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--horizon", type=float, default=60.0)
    ap.add_argument("--seeds", type=int, default=2)
    ap.add_argument("--gamma", type=float, default=0.02)
    ap.add_argument("--geometries", nargs="+", default=list(GEOMETRIES), choices=list(GEOMETRIES))
    args = ap.parse_args()
    for name in args.geometries:
        build, M, N = GEOMETRIES[name]
        op = tr.build_effective_operator(build(M), 1.0, 0.0, args.gamma, N)
        for seed in range(args.seeds):
            rec = tr.run_trajectory(op, tr.initial_superfluid(op.geom, N), args.horizon, 1.0,
                                    batch.stream(6, seed), record_distribution=True)
            for m in range(op.geom.R):
                digits = "".join(str(min(count_peaks(d[m], 0.1, smooth=2), 9)) for d in rec.distributions)
                print(f"{name:5s} seed {seed} mode {m}: {digits}")


if __name__ == "__main__":
    main()
