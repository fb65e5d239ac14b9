"""Batch orchestration: seeding, parallel execution, outputs and ensemble summaries.

Every trajectory draws from its own stream ``SeedSequence(master_seed,
spawn_key=key)``, where ``key`` is the trajectory index (prefixed by the
efficiency index in SME sweeps). The moment engines advance trajectories in
vectorised blocks, each block seeded by its block index. Results are
gathered in index order, so outputs do not depend on the worker count.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, gaussian as gm, moments as mm, sme as smem, trajectory as tr
from .config import RunConfig, from_dict

QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)
_OP_CACHE: dict = {}


def stream(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))


def stream_fingerprint(master_seed: int, *key: int) -> tuple:
    """First 128 bits of a stream's state, for collision checks."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(key))
    return tuple(int(x) for x in ss.generate_state(4))


def run_hash(cfg: RunConfig) -> str:
    """Config hash without the execution-only fields (workers, output path)."""
    d = cfg.to_dict()
    d["run"] = {k: v for k, v in d["run"].items() if k not in ("workers", "output")}
    return tr.config_hash(d)


# ---------------------------------------------------------------- engine dispatch

def _physical(cfg: RunConfig):
    """Horizon and sample spacing in physical time."""
    J = cfg.physics.J if cfg.physics.J > 0 else 1.0
    return cfg.run.horizon / J, cfg.run.sample_dt / J, J


def _operator(cfg: RunConfig, oracle: bool = False):
    p = cfg.physics
    key = (tr.config_hash({"physics": cfg.to_dict()["physics"], "geometry": cfg.to_dict()["geometry"]}),
           oracle)
    if key not in _OP_CACHE:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            geom = cfg.build_geometry()
        if oracle:
            op, basis = tr.oracle_model(geom, cfg.lattice(), p.J, p.U, p.gamma, p.N)
            psi0 = tr.lattice_superfluid(basis)
            extra = tr.leakage_observer(tr.subspace_embedding(geom, basis, p.N))
        else:
            op = tr.build_effective_operator(geom, p.J, p.U, p.gamma, p.N)
            psi0 = tr.initial_superfluid(geom, p.N)
            extra = None
        _OP_CACHE.clear()
        _OP_CACHE[key] = (op, psi0, extra)
    return _OP_CACHE[key]


def gaussian_params(cfg: RunConfig) -> gm.GaussianParams:
    p, g = cfg.physics, cfg.gaussian
    base = gm.GaussianParams.from_physical(p.J, p.gamma, p.N, p.U, p.M)
    return gm.GaussianParams(J=p.J,
                             Gamma=base.Gamma if g.Gamma is None else g.Gamma * p.J,
                             h=base.h if g.h is None else g.h,
                             Lambda=base.Lambda if g.Lambda is None else g.Lambda)


def _run_single(cfg: RunConfig, key: tuple, eta: float | None):
    """One trajectory; returns a record with ``jsonl_lines`` and ``summary``."""
    horizon, sdt, J = _physical(cfg)
    rng = stream(cfg.run.master_seed, *key)
    seed = [cfg.run.master_seed, *key]
    chash = run_hash(cfg)
    engine = cfg.run.engine
    if engine in ("exact", "oracle"):
        op, psi0, leak = _operator(cfg, oracle=engine == "oracle")
        observers = {"leakage": leak} if leak is not None else None
        return tr.run_trajectory(op, psi0, horizon, sdt, rng, cfg.run.record_distribution,
                                 observers=observers, seed=seed, config_hash=chash)
    if engine == "sme":
        op, psi0, _ = _operator(cfg)
        s = cfg.sme
        return smem.run_sme(op, psi0, eta, horizon, sdt, rng, p_max=s.p_max, max_dt=s.max_dt / J,
                            check_every=s.check_every, seed=seed, config_hash=chash)
    if engine == "gaussian":
        g = cfg.gaussian
        P = gaussian_params(cfg)
        jumps, flow_gamma = g.jumps, None if g.flow_gamma is None else g.flow_gamma * J
        if g.flow == "none":
            P = gm.GaussianParams(J=0.0, Gamma=P.Gamma, h=P.h, Lambda=P.Lambda)
            flow_gamma = 0.0
        if jumps == "exact":
            op, psi0, _ = _operator(cfg)
            src = tr.run_trajectory(op, psi0, horizon, sdt, rng)
            jumps = src.jump_times
        rec = gm.run_gaussian_trajectory(P, horizon, sdt, rng, b2_0=g.b2_0, z0_0=g.z0_0,
                                         jumps=jumps, flow_gamma=flow_gamma, p_max=g.p_max,
                                         seed=seed, config_hash=chash)
        return rec
    raise ValueError(f"engine {engine} is not a single-trajectory engine")


def _task(args):
    cfg_dict, key, eta = args
    cfg = from_dict(cfg_dict)
    try:
        rec = _run_single(cfg, key, eta)
        J = _physical(cfg)[2]
        return {"key": key, "ok": True, "lines": list(rec.jsonl_lines(J)),
                "summary": rec.summary(J), "obs": observable(cfg, rec),
                "snap": _snapshots(cfg, rec)}
    except Exception as exc:  # quarantined, reported in the batch report
        return {"key": key, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _moment_block(args):
    cfg_dict, block, size = args
    cfg = from_dict(cfg_dict)
    p, m = cfg.physics, cfg.moments
    horizon, sdt, J = _physical(cfg)
    mode = "jump" if cfg.run.engine == "moments-jump" else "diffusion"
    n = min(size, cfg.run.n_trajectories - block * m.block_size)
    try:
        rec = mm.run_moments(p.N, p.J, p.gamma, horizon, sdt, n, mode, stream(cfg.run.master_seed, block),
                             dt=None if m.dt is None else m.dt / J, p_max=m.p_max,
                             seed=[cfg.run.master_seed, block], config_hash=run_hash(cfg))
    except Exception as exc:
        return [{"key": (block * m.block_size + j,), "ok": False,
                 "error": f"{type(exc).__name__}: {exc}"} for j in range(n)]
    out = []
    for j in range(n):
        out.append({"key": (block * m.block_size + j,), "ok": True,
                    "lines": list(rec.jsonl_lines(j, J)),
                    "summary": {"seed": [cfg.run.master_seed, block], "block_member": j,
                                "config_hash": rec.config_hash, "n_jumps": int(rec.jump_counts[j, -1])},
                    "obs": rec.states[j, :, 0].tolist(), "snap": {}})
    return out


def observable(cfg: RunConfig, rec) -> list:
    """Primary scalar series: occupation of mode 0 (N_odd), or z0 for the Gaussian model."""
    if isinstance(rec, gm.GaussianRecord):
        return rec.states[:, 2].tolist()
    if isinstance(rec, smem.SMERecord):
        return rec.n_mean.tolist()
    return rec.mode_means[:, 0].tolist()


def observable_center(cfg: RunConfig) -> float:
    p = cfg.physics
    if cfg.run.engine == "gaussian":
        return 0.0
    if cfg.run.engine in ("exact", "oracle"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return p.N * float(cfg.build_geometry().fractions[0])
    return p.N / 2


def snapshot_times(cfg: RunConfig) -> list[float]:
    H = cfg.run.horizon
    return [0.25 * H, 0.5 * H, 0.75 * H, H]


def _snapshots(cfg: RunConfig, rec) -> dict:
    """Per-mode occupation distributions at the snapshot times (exact engines only)."""
    d = getattr(rec, "distributions", None)
    if d is None:
        return {}
    out = {}
    for t in snapshot_times(cfg):
        k = int(round(t / cfg.run.sample_dt))
        out[f"{t:g}"] = d[k].tolist()
    return out


# ---------------------------------------------------------------- summaries

@dataclass
class EnsembleSummary:
    times: np.ndarray               # units of 1/J
    observable: str
    mean: np.ndarray
    bands: dict
    envelope_slopes: np.ndarray
    envelope_stderr: np.ndarray
    spectral_peaks: np.ndarray      # units of J
    snapshots: dict = field(default_factory=dict)
    n_ok: int = 0
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        slopes = self.envelope_slopes
        return {
            "observable": self.observable,
            "n_ok": self.n_ok,
            "n_failed": len(self.failures),
            "failures": self.failures,
            "envelope": {
                "slopes": slopes.tolist(),
                "stderr": [None if not np.isfinite(s) else float(s) for s in self.envelope_stderr],
                "median_slope": float(np.median(slopes)) if len(slopes) else None,
                "positive_fraction": float(np.mean(slopes > 0)) if len(slopes) else None,
            },
            "spectral_peak": {
                "per_trajectory": [None if not np.isfinite(w) else float(w) for w in self.spectral_peaks],
                "median": _finite_median(self.spectral_peaks),
            },
            "snapshots": self.snapshots,
        }


def _finite_median(x):
    x = np.asarray(x, dtype=float)
    x = x[np.isfinite(x)]
    return float(np.median(x)) if len(x) else None


def summarize(times, series: np.ndarray, center: float, name: str, snapshots=None,
              failures=None) -> EnsembleSummary:
    """Ensemble summary of ``series`` with shape ``(n_traj, n_samples)``; times in 1/J."""
    series = np.atleast_2d(np.asarray(series, dtype=float))
    times = np.asarray(times, dtype=float)
    if series.size == 0:
        empty = np.array([])
        return EnsembleSummary(times, name, empty, {}, empty, empty, empty, {}, 0, failures or [])
    bands = analysis.quantile_bands(series, QUANTILES)
    slopes, errs, peaks = [], [], []
    floor = 1e-9 * max(1.0, abs(center))          # rounding drift is not oscillation
    for x in series:
        env = analysis.envelope(times, x, center, floor=floor)
        slopes.append(env.slope)
        errs.append(env.stderr)
        try:
            peaks.append(analysis.spectral_peak(times, x) if np.ptp(x) > 1e-12 else np.nan)
        except ValueError:
            peaks.append(np.nan)
    snaps = {}
    for t, dists in (snapshots or {}).items():
        arr = np.asarray(dists)                   # (n_traj, R, N+1)
        counts = [[analysis.count_peaks(p, smooth=2) for p in traj] for traj in arr]
        snaps[t] = {"mean_distribution": arr.mean(axis=0).tolist(),
                    "peak_counts": counts}
    return EnsembleSummary(times, name, series.mean(axis=0), bands, np.array(slopes), np.array(errs),
                           np.array(peaks), snaps, len(series), failures or [])


# ---------------------------------------------------------------- batch

def _jobs(cfg: RunConfig):
    raw = cfg.to_dict()
    if cfg.run.engine.startswith("moments"):
        B = cfg.moments.block_size
        nb = math.ceil(cfg.run.n_trajectories / B)
        return _moment_block, [(raw, b, B) for b in range(nb)]
    if cfg.run.engine == "sme":
        raise ValueError("SME batches go through run_sme_sweep")
    return _task, [(raw, (i,), None) for i in range(cfg.run.n_trajectories)]


def _execute(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        results = [fn(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, jobs))
    flat = []
    for r in results:
        flat.extend(r if isinstance(r, list) else [r])
    return flat


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n")


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_ensemble_csv(path: Path, summary: EnsembleSummary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        keys = sorted(summary.bands)
        w.writerow(["t", "mean", *keys])
        for k, t in enumerate(summary.times):
            w.writerow([repr(float(t)), repr(float(summary.mean[k])),
                        *(repr(float(summary.bands[q][k])) for q in keys)])


def _write_results(out: Path, cfg: RunConfig, results: list, tag: str = "") -> EnsembleSummary:
    tdir = out / "trajectories"
    tdir.mkdir(parents=True, exist_ok=True)
    ok = [r for r in results if r["ok"]]
    failures = [{"index": list(r["key"]), "error": r["error"]} for r in results if not r["ok"]]
    with open(out / "summaries.jsonl", "w") as fh:
        for r in ok:
            name = "traj_" + "_".join(f"{k:05d}" for k in r["key"]) + ".jsonl"
            (tdir / name).write_text("\n".join(r["lines"]) + "\n")
            fh.write(json.dumps(_clean({"index": list(r["key"]), "file": f"trajectories/{name}",
                                        **r["summary"]}), sort_keys=True) + "\n")
    J = _physical(cfg)[2]
    nsamp = int(round(cfg.run.horizon / cfg.run.sample_dt)) + 1
    times = np.arange(nsamp) * cfg.run.sample_dt
    snaps: dict = {}
    for r in ok:
        for t, d in r["snap"].items():
            snaps.setdefault(t, []).append(d)
    summary = summarize(times, [r["obs"] for r in ok], observable_center(cfg), _obs_name(cfg),
                        snaps, failures)
    if ok:
        write_ensemble_csv(out / "ensemble.csv", summary)
    report = {"engine": cfg.run.engine, "config_hash": run_hash(cfg),
              "n_trajectories": cfg.run.n_trajectories, "time_unit": "1/J", "J": J,
              "summary": summary.to_dict(), "tag": tag}
    report.update(_engine_report(cfg))
    _write_json(out / "report.json", report)
    return summary


def _obs_name(cfg: RunConfig) -> str:
    return "z0" if cfg.run.engine == "gaussian" else "n_mode0"


def _engine_report(cfg: RunConfig) -> dict:
    out = {}
    if cfg.run.engine in ("exact", "oracle", "sme") or cfg.gaussian.jumps == "exact":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            out["geometry"] = cfg.build_geometry().to_dict()
    if cfg.run.engine == "gaussian":
        P = gaussian_params(cfg)
        out["stability"] = gm.stability_report(P) if P.J > 0 else {"params": P.__dict__}
    return out


def run_batch(cfg: RunConfig, output: str | Path | None = None) -> EnsembleSummary | dict:
    """Run every trajectory of ``cfg`` and write its outputs.

    Layout of the output directory::

        config.json            resolved configuration
        trajectories/*.jsonl   one sample per line, time in units of 1/J
        summaries.jsonl        one line per trajectory (seed, jump times, ...)
        ensemble.csv           mean and quantile bands of the primary observable
        report.json            envelope, spectral peak, snapshots, failures, engine report

    SME runs with several efficiencies write one such directory per value
    (``eta_<value>/``) plus ``eta_sweep.csv`` and return a dict of summaries.
    """
    out = Path(output or cfg.run.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    if cfg.run.engine == "sme":
        return run_sme_sweep(cfg, out)
    fn, jobs = _jobs(cfg)
    results = _execute(fn, jobs, cfg.run.workers)
    return _write_results(out, cfg, results)


def run_sme_sweep(cfg: RunConfig, out: Path) -> dict:
    etas = list(cfg.sme.etas) or [cfg.physics.eta]
    raw = cfg.to_dict()
    summaries, rows = {}, []
    finals = {}
    for ie, eta in enumerate(etas):
        jobs = [(raw, (ie, i), float(eta)) for i in range(cfg.run.n_trajectories)]
        results = _execute(_task, jobs, cfg.run.workers)
        sub = out / f"eta_{eta:g}"
        summ = _write_results(sub, cfg, results, tag=f"eta={eta:g}")
        summaries[float(eta)] = summ
        nph = [r["summary"]["n_detections"] for r in results if r["ok"]]
        finals[float(eta)] = float(np.mean(nph)) if nph else float("nan")
        band = summ.bands.get("q95", np.array([np.nan]))[-1] - summ.bands.get("q05", np.array([np.nan]))[-1] \
            if summ.n_ok else float("nan")
        rows.append((float(eta), summ.n_ok, finals[float(eta)],
                     float(np.median(summ.envelope_slopes)) if summ.n_ok else float("nan"), float(band)))
    ref = finals.get(1.0)
    with open(out / "eta_sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eta", "n_ok", "mean_n_ph", "n_ph_over_eta1", "median_envelope_slope", "final_band_width"])
        for eta, n, nph, slope, band in rows:
            norm = nph / ref if ref else float("nan")
            w.writerow([repr(eta), n, repr(nph), repr(norm), repr(slope), repr(band)])
    return summaries


# ---------------------------------------------------------------- report / sweep

def load_directory(path: str | Path) -> EnsembleSummary:
    """Rebuild the ensemble summary of a finished run from its files."""
    path = Path(path)
    cfg = from_dict(json.loads((path / "config.json").read_text()) if (path / "config.json").exists()
                    else json.loads((path.parent / "config.json").read_text()))
    key = "z0" if cfg.run.engine == "gaussian" else ("n_odd" if cfg.run.engine in
                                                     ("sme", "moments-jump", "moments-diffusion")
                                                     else "means")
    series, times = [], None
    for f in sorted((path / "trajectories").glob("*.jsonl")):
        rows = [json.loads(line) for line in f.read_text().splitlines() if line]
        times = np.array([r["t"] for r in rows])
        series.append([r[key][0] if key == "means" else r[key] for r in rows])
    if times is None:
        raise FileNotFoundError(f"no trajectories under {path}")
    return summarize(times, series, observable_center(cfg), _obs_name(cfg))


def run_sweep(cfg_data: dict, param: str, values: list, output: str | Path) -> list[dict]:
    """One batch per value of ``param``; writes ``sweep.csv`` in ``output``."""
    from .config import with_override
    out = Path(output)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v in values:
        cfg = from_dict(with_override(cfg_data, param, v))
        sub = out / f"{param.split('.')[-1]}_{v:g}" if isinstance(v, (int, float)) else out / f"{param}_{v}"
        res = run_batch(cfg, sub)
        summaries = res if isinstance(res, dict) else {None: res}
        for eta, s in summaries.items():
            rows.append({"value": v, "eta": eta, "n_ok": s.n_ok,
                         "median_envelope_slope": float(np.median(s.envelope_slopes)) if s.n_ok else None,
                         "median_spectral_peak": _finite_median(s.spectral_peaks)})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["value", "eta", "n_ok", "median_envelope_slope",
                                           "median_spectral_peak"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return rows


# ---------------------------------------------------------------- cross-engine

def cross_engine_report(configs: list[RunConfig], rel_tol: float = 0.05) -> dict:
    """Consistency table for engines sharing ``(N, J, gamma)``.

    Each configuration is run in memory; the table lists the median spectral
    peak (units of J), the median envelope slope and, for the Gaussian model,
    the stationary-point residual. ``consistent`` is true when every spectral
    peak lies within ``rel_tol`` of every other.
    """
    phys = {(c.physics.N, c.physics.J, c.physics.gamma) for c in configs}
    if len(phys) != 1:
        raise ValueError("engines must share (N, J, gamma)")
    rows = []
    for cfg in configs:
        _, sdt, J = _physical(cfg)
        nsamp = int(round(cfg.run.horizon / cfg.run.sample_dt)) + 1
        times = np.arange(nsamp) * cfg.run.sample_dt
        if cfg.run.engine.startswith("moments"):
            fn, jobs = _jobs(cfg)
            results = _execute(fn, jobs, 1)
        else:
            results = [_task((cfg.to_dict(), (i,), cfg.physics.eta)) for i in range(cfg.run.n_trajectories)]
        ok = [r for r in results if r["ok"]]
        s = summarize(times, [r["obs"] for r in ok], observable_center(cfg), _obs_name(cfg))
        row = {"engine": cfg.run.engine, "spectral_peak": _finite_median(s.spectral_peaks),
               "median_envelope_slope": float(np.median(s.envelope_slopes)) if s.n_ok else None,
               "n_ok": s.n_ok}
        if cfg.run.engine == "gaussian":
            P = gaussian_params(cfg)
            if P.Gamma > 0:
                sp = gm.stationary_point(P)
                row["stationary_residual"] = float(np.max(np.abs(gm._rhs(sp.state().vector(), P, P.Gamma))))
        rows.append(row)
    peaks = [r["spectral_peak"] for r in rows if r["spectral_peak"] is not None]
    spread = (max(peaks) - min(peaks)) / min(peaks) if peaks else float("nan")
    return {"rows": rows, "relative_spread": spread, "tolerance": rel_tol,
            "consistent": bool(peaks) and spread <= rel_tol}


def oracle_agreement(M: int = 4, N: int = 2, J: float = 1.0, gamma: float = 0.1, horizon: float = 5.0,
                     sample_dt: float = 0.05, seed: int = 0) -> float:
    """Max deviation of mode occupations between oracle and reduced engine (shared RNG)."""
    from .geometry import LatticeSpec, odd_sites
    geom = odd_sites(M)
    a = tr.oracle_full_lattice(geom, LatticeSpec(M), J, 0.0, gamma, N, horizon, sample_dt,
                               rng=np.random.default_rng(seed))
    op = tr.build_effective_operator(geom, J, 0.0, gamma, N)
    b = tr.run_trajectory(op, tr.initial_superfluid(geom, N), horizon, sample_dt,
                          np.random.default_rng(seed))
    return float(np.max(np.abs(a.mode_means - b.mode_means)))
