"""Run every bundled figure preset and print one summary line each.

    python3 scripts/run_presets.py [--short] [--out DIR] [NAME ...]

``--short`` caps the horizon at 2 (units of 1/J) for a quick smoke run.
"""
import argparse
import time
from pathlib import Path

from weakmeas import batch, cli
from weakmeas.config import from_dict, load_raw, with_override


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*")
    ap.add_argument("--short", action="store_true")
    ap.add_argument("--out", default="out/presets")
    args = ap.parse_args()
    for path in sorted(cli.preset_dir().glob("*.toml")):
        if args.names and path.stem not in args.names:
            continue
        data = load_raw(path)
        if args.short:
            data = with_override(data, "run.horizon", 2.0)
        start = time.perf_counter()
        res = batch.run_batch(from_dict(data), Path(args.out) / path.stem)
        summaries = res if isinstance(res, dict) else {None: res}
        for eta, s in summaries.items():
            d = s.to_dict()
            tag = path.stem if eta is None else f"{path.stem} eta={eta:g}"
            print(f"{tag:40s} {time.perf_counter() - start:7.1f}s  ok={d['n_ok']}  "
                  f"slope={d['envelope']['median_slope']}  peak={d['spectral_peak']['median']}")


if __name__ == "__main__":
    main()
