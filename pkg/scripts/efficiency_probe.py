"""Detector-efficiency probe: envelope, band width and staircase steps per efficiency.

    python3 scripts/efficiency_probe.py [--N 60] [--gamma 0.01] [--horizon 100] [--etas 0 0.1 1]
"""
import argparse

from weakmeas import batch, geometry as geo, sme, trajectory as tr
from weakmeas.analysis import envelope


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=60)
    ap.add_argument("--gamma", type=float, default=0.01)
    ap.add_argument("--horizon", type=float, default=100.0)
    ap.add_argument("--etas", type=float, nargs="+", default=[0.0, 0.1, 1.0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--window", type=float, default=0.4)
    args = ap.parse_args()
    op = tr.build_effective_operator(geo.odd_sites(2 * args.N), 1.0, 0.0, args.gamma, args.N)
    psi0 = tr.initial_superfluid(op.geom, args.N)
    print(f"efficiency threshold J/(gamma N^2) = {sme.efficiency_threshold(1.0, args.gamma, args.N):.3g}")
    for k, eta in enumerate(args.etas):
        r = sme.run_sme(op, psi0, eta, args.horizon, 0.1, batch.stream(args.seed, k))
        e = envelope(r.times, r.n_mean, args.N / 2, floor=1e-9)
        line = (f"eta={eta:<5g} counts={len(r.detection_times):5d} slope={e.slope:+.3e}+-{e.stderr:.1e} "
                f"sigma {r.sigma[0]:.2f}->{r.sigma[-1]:.2f} purity={r.purity[-1]:.3f}")
        if len(r.detection_times):
            try:
                st = sme.staircase_detect(r.detection_times, args.horizon, args.window)
                line += f" steps={st['steps']} period={st['period']}"
            except sme.InsufficientData as exc:
                line += f" staircase: {exc}"
        print(line)


if __name__ == "__main__":
    main()
