"""Spectral peak of the imbalance from the exact, Gaussian and moment engines.

    python3 scripts/cross_engine.py [--N 100] [--gamma 0.01] [--horizon 40]
"""
import argparse
import json

from weakmeas import batch
from weakmeas.config import from_dict, with_override


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--N", type=int, default=100)
    ap.add_argument("--gamma", type=float, default=0.01)
    ap.add_argument("--horizon", type=float, default=40.0)
    args = ap.parse_args()
    base = {"run": {"horizon": args.horizon, "sample_dt": 0.1, "n_trajectories": 1, "master_seed": 7},
            "physics": {"N": args.N, "M": 2 * args.N, "J": 1.0, "gamma": args.gamma},
            "geometry": {"named": "odd_sites"}}
    cfgs = [from_dict(with_override(base, "run.engine", e)) for e in ("exact", "moments-jump", "moments-diffusion")]
    g = with_override(base, "run.engine", "gaussian")
    g["gaussian"] = {"Gamma": 0.001, "b2_0": 0.04}
    g["run"] = {**g["run"], "horizon": max(args.horizon, 100.0), "n_trajectories": 5}
    cfgs.append(from_dict(g))
    print(json.dumps(batch.cross_engine_report(cfgs), indent=1, default=str))


if __name__ == "__main__":
    main()
