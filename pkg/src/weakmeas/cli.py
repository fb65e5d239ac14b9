"""Command line: ``weakmeas run | sweep | report | presets``."""
from __future__ import annotations

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

from . import batch
from .config import ConfigError, from_dict, load_raw, parse_config


def preset_dir() -> Path:
    return Path(str(resources.files("weakmeas") / "presets"))


def resolve_config(name: str) -> Path:
    """A path, or the name of a bundled preset (with or without ``.toml``)."""
    p = Path(name)
    if p.exists():
        return p
    q = preset_dir() / (name if name.endswith(".toml") else name + ".toml")
    if q.exists():
        return q
    raise ConfigError([f"{name}: no such file or preset"])


def _value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _print_summary(label: str, s: batch.EnsembleSummary) -> None:
    d = s.to_dict()
    env, spec = d["envelope"], d["spectral_peak"]
    print(f"{label}: {d['n_ok']} ok, {d['n_failed']} failed; "
          f"median envelope slope {env['median_slope']}, positive fraction {env['positive_fraction']}, "
          f"median spectral peak {spec['median']}")


def cmd_run(args) -> int:
    path = resolve_config(args.config)
    data = load_raw(path)
    for item in args.set or []:
        key, _, val = item.partition("=")
        from .config import with_override
        data = with_override(data, key, _value(val))
    cfg = from_dict(data)
    if args.output:
        cfg.run.output = args.output
    if args.workers:
        cfg.run.workers = args.workers
    res = batch.run_batch(cfg)
    if isinstance(res, dict):
        for eta, s in res.items():
            _print_summary(f"eta={eta:g}", s)
    else:
        _print_summary(cfg.run.engine, res)
    print(f"outputs in {cfg.run.output}")
    return 0


def cmd_sweep(args) -> int:
    data = load_raw(resolve_config(args.config))
    parse_config(resolve_config(args.config))
    out = args.output or from_dict(data).run.output + f"_sweep_{args.param.split('.')[-1]}"
    rows = batch.run_sweep(data, args.param, [_value(v) for v in args.values], out)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    print(f"outputs in {out}")
    return 0


def cmd_report(args) -> int:
    root = Path(args.dir)
    targets = sorted({p.parent for p in root.rglob("trajectories")}) if root.exists() else []
    if not targets:
        print(f"no runs found under {root}", file=sys.stderr)
        return 1
    for t in targets:
        _print_summary(str(t), batch.load_directory(t))
    return 0


def cmd_presets(args) -> int:
    for p in sorted(preset_dir().glob("*.toml")):
        cfg = parse_config(p)
        first = p.read_text().splitlines()[0].lstrip("# ").strip()
        print(f"{p.stem:28s} {cfg.run.engine:18s} {first}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="weakmeas", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a batch from a config file or preset name")
    r.add_argument("config")
    r.add_argument("--output", "-o")
    r.add_argument("--workers", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a field, e.g. run.horizon=5 or gamma=0.01")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one batch per parameter value")
    s.add_argument("config")
    s.add_argument("--param", required=True, help="field name, e.g. gamma or physics.N")
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--output", "-o")
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="summarise the runs found under a directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)

    ps = sub.add_parser("presets", help="bundled figure presets")
    ps.add_argument("action", choices=["list"])
    ps.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
