"""Stochastic master equation for photon counting with detector efficiency η.

The conditional state is a density matrix on the two-mode partition basis.
The jump operator ``c = sqrt(gamma) * diag(d)`` is diagonal there, so the
measurement part of the no-detection generator acts elementwise:

    rho_ij  ->  rho_ij * exp[(-(gamma/2)(|d_i|^2 + |d_j|^2) + (1 - eta) gamma d_i conj(d_j)) dt]

We integrate it with a Strang splitting around the unitary step
``exp(-i H0 dt)``. Both factors are completely positive, so trace
normalisation is the only non-linear operation. A detection is a
Bernoulli event with probability ``eta Tr(c rho c^dag) dt`` per step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import ndimage, signal
from scipy.integrate import solve_ivp

from .trajectory import EffectiveOperator

# dyadic refinement levels available inside one sample interval
_MAX_LEVEL = 24


class SMEError(RuntimeError):
    pass


class InsufficientData(ValueError):
    pass


@dataclass
class ConditionalDensityMatrix:
    rho: np.ndarray
    eta: float

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")

    @classmethod
    def pure(cls, psi, eta: float) -> "ConditionalDensityMatrix":
        psi = np.asarray(psi, dtype=complex)
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()), eta)

    def check(self, tol_trace: float = 1e-9, tol_herm: float = 1e-12, tol_pos: float = 1e-9):
        """Raise :class:`SMEError` if trace, Hermiticity or positivity fail."""
        tr = np.trace(self.rho).real
        if abs(tr - 1) > tol_trace:
            raise SMEError(f"trace drifted to {tr}")
        if np.abs(self.rho - self.rho.conj().T).max() > tol_herm:
            raise SMEError("density matrix lost Hermiticity")
        ev = np.linalg.eigvalsh(self.rho)
        if ev.min() < -tol_pos:
            raise SMEError(f"negative eigenvalue {ev.min():.3e}: step too large")


def photocurrent(rho: np.ndarray, op: EffectiveOperator, eta: float) -> float:
    """Expected detection rate ``eta Tr(c rho c^dag)``."""
    return float(eta * op.gamma * np.real(np.abs(op.jump) ** 2 @ np.diag(rho)))


def efficiency_threshold(J: float, gamma: float, N: int) -> float:
    """Scale ``J / (gamma N^2)`` above which oscillations stay visible."""
    return J / (gamma * N * N)


def jump_superop(rho: np.ndarray, op: EffectiveOperator) -> np.ndarray:
    """``G[c] rho``: detection update, renormalised."""
    d = op.jump
    out = d[:, None] * rho * d.conj()[None, :]
    tr = np.trace(out).real
    if tr < 1e-300:
        raise SMEError("detection from a state in the kernel of c")
    return out / tr


class _Stepper:
    """Cached split-step factors on a dyadic ladder of step sizes."""

    def __init__(self, op: EffectiveOperator, eta: float, base_dt: float):
        self.op, self.eta, self.base = op, eta, base_dt
        H0 = op.H.toarray()
        self.H0 = 0.5 * (H0 + H0.conj().T)
        d = op.jump
        a = np.abs(d) ** 2
        self.L = op.gamma * (-0.5 * (a[:, None] + a[None, :]) + (1 - eta) * np.outer(d, d.conj()))
        self.rate_diag = eta * op.gamma * a
        self._cache: dict[float, tuple] = {}

    def factors(self, dt: float):
        f = self._cache.get(dt)
        if f is None:
            f = (np.exp(0.5 * dt * self.L), scipy.linalg.expm(-1j * dt * self.H0))
            if len(self._cache) < 64:
                self._cache[dt] = f
        return f

    def step(self, rho: np.ndarray, dt: float) -> np.ndarray:
        E, U = self.factors(dt)
        rho = E * rho
        rho = U @ rho @ U.conj().T
        rho = E * rho
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        if tr < 1e-12:
            raise SMEError(f"trace collapsed to {tr:.3e}")
        return rho / tr

    def rate(self, rho: np.ndarray) -> float:
        return float(self.rate_diag @ np.diag(rho).real)


def sme_step(rho: np.ndarray, op: EffectiveOperator, dt: float, eta: float,
             rng: np.random.Generator, stepper: _Stepper | None = None):
    """One step: Bernoulli detection, then the no-detection evolution over ``dt``.

    Returns ``(rho', dN)``.
    """
    st = stepper or _Stepper(op, eta, dt)
    p = st.rate(rho) * dt
    if p >= 0.1:
        raise SMEError(f"detection probability {p:.3f} per step is too large")
    dN = int(rng.random() < p)
    if dN:
        rho = jump_superop(rho, op)
    return st.step(rho, dt), dN


@dataclass
class SMERecord:
    times: np.ndarray
    n_mean: np.ndarray          # <N_1> (mode 0) at samples
    sigma: np.ndarray
    n_ph: np.ndarray            # cumulative detections at samples
    detection_times: np.ndarray
    eta: float
    purity: np.ndarray
    seed: int | None = None
    config_hash: str | None = None
    extras: dict = field(default_factory=dict)

    def jsonl_lines(self, J: float = 1.0):
        for k, t in enumerate(self.times):
            row = {"t": float(t * J), "n_odd": float(self.n_mean[k]), "sigma": float(self.sigma[k]),
                   "n_ph": int(self.n_ph[k]), "purity": float(self.purity[k])}
            yield json.dumps(row, separators=(",", ":"))

    def summary(self, J: float = 1.0) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash, "eta": self.eta,
                "detection_times": [float(t * J) for t in self.detection_times],
                "n_detections": int(len(self.detection_times))}


def run_sme(op: EffectiveOperator, psi0, eta: float, horizon: float, sample_dt: float,
            rng: np.random.Generator | int | None = None, p_max: float = 0.01,
            max_dt: float = 0.01, check_every: int = 0, forced_jumps=None, seed=None,
            config_hash: str | None = None, final_state: bool = False) -> SMERecord:
    """Conditional evolution from the pure state ``psi0``.

    The step is the largest dyadic fraction of ``min(sample_dt, max_dt)``
    keeping the per-step detection probability below ``p_max``.
    ``forced_jumps`` (times) replaces the Bernoulli draws, the step grid
    being cut at each forced time. ``check_every > 0`` verifies trace,
    Hermiticity and positivity at every that-many samples. Times are
    physical.
    """
    if not isinstance(rng, np.random.Generator):
        seed = rng if seed is None else seed
        rng = np.random.default_rng(rng)
    state = ConditionalDensityMatrix.pure(psi0, eta)
    rho = state.rho
    nsamp = int(round(horizon / sample_dt)) + 1
    times = np.arange(nsamp) * sample_dt
    n0 = max(1, int(np.ceil(sample_dt / max_dt - 1e-12)))
    base = sample_dt / n0
    st = _Stepper(op, eta, base)
    occ = op.occ[:, 0].astype(float)

    forced = None if forced_jumps is None else list(np.sort(np.asarray(forced_jumps, float)))
    n_mean, sigma, nph, pur = (np.empty(nsamp) for _ in range(4))
    det: list[float] = []

    def record(k):
        p = np.diag(rho).real
        m = p @ occ
        n_mean[k] = m
        sigma[k] = np.sqrt(max(p @ occ ** 2 - m * m, 0.0))
        nph[k] = len(det)
        pur[k] = np.vdot(rho, rho).real

    record(0)
    for k in range(1, nsamp):
        t_start = times[k - 1]
        if forced is not None:
            rho = _forced_interval(rho, st, t_start, times[k], base, forced, det, op)
        else:
            ticks, total = 0, n0 << _MAX_LEVEL
            while ticks < total:
                rate = st.rate(rho)
                lev = 0
                while lev < _MAX_LEVEL and (rate * base / (1 << lev) > p_max
                                            or ticks % (1 << (_MAX_LEVEL - lev)) != 0):
                    lev += 1
                dt = base / (1 << lev)
                if rate * dt > p_max and lev == _MAX_LEVEL:
                    raise SMEError("cannot reach the detection-probability bound")
                if rng.random() < rate * dt:
                    rho = jump_superop(rho, op)
                    det.append(t_start + ticks * base / (1 << _MAX_LEVEL))
                rho = st.step(rho, dt)
                ticks += 1 << (_MAX_LEVEL - lev)
        record(k)
        if check_every and k % check_every == 0:
            ConditionalDensityMatrix(rho, eta).check()
    rec = SMERecord(times, n_mean, sigma, nph, np.asarray(det), eta, pur, seed=seed,
                    config_hash=config_hash)
    if final_state:
        rec.extras["rho"] = rho
    return rec


def _forced_interval(rho, st, t0, t1, base, forced, det, op):
    t = t0
    while t < t1 - 1e-15:
        nxt = forced[0] if forced else np.inf
        if t <= nxt < t + 1e-15:
            rho = jump_superop(rho, op)
            det.append(nxt)
            forced.pop(0)
            continue
        dt = min(base, t1 - t, nxt - t)
        rho = st.step(rho, dt)
        t += dt
    return rho


def thin(detection_times, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each detection independently with probability ``eta``."""
    detection_times = np.asarray(detection_times)
    return detection_times[rng.random(len(detection_times)) < eta]


def lindblad_rhs(op: EffectiveOperator):
    """Unconditional generator ``-i[H, rho] + D[c] rho`` on flattened matrices."""
    H0 = op.H.toarray()
    d = op.jump
    a = np.abs(d) ** 2
    L = op.gamma * (np.outer(d, d.conj()) - 0.5 * (a[:, None] + a[None, :]))
    n = len(d)

    def f(t, y):
        rho = y.reshape(n, n)
        return (-1j * (H0 @ rho - rho @ H0) + L * rho).ravel()

    return f


def lindblad_evolve(op: EffectiveOperator, psi0, times, rtol: float = 1e-10,
                    atol: float = 1e-12) -> np.ndarray:
    """Unconditional density matrices at ``times``; shape ``(len(times), n, n)``."""
    psi0 = np.asarray(psi0, dtype=complex)
    rho0 = np.outer(psi0, psi0.conj())
    n = len(psi0)
    sol = solve_ivp(lindblad_rhs(op), (0.0, float(times[-1])), rho0.ravel(), t_eval=times,
                    rtol=rtol, atol=atol, method="DOP853")
    if not sol.success:
        raise SMEError(sol.message)
    return sol.y.T.reshape(len(times), n, n)


def staircase_detect(detection_times, horizon: float, window: float, bin_width: float | None = None,
                     z_threshold: float | None = None, false_alarm: float = 0.05) -> dict:
    """Risers of the cumulative count ``N_ph(t)``.

    Detections are binned and the rate is smoothed with a Gaussian of width
    ``window``. A maximum counts as a riser when both its prominence and its
    height above a running-median baseline exceed ``z_threshold`` times the
    Poisson noise of the smoothed rate. By default the threshold is set from
    the Rice upcrossing rate of the smoothed noise so that a constant-rate
    record of this length shows on average ``false_alarm`` spurious risers.
    Returns the riser count, their times and the median spacing (``None``
    with fewer than two risers).
    """
    if horizon <= 0 or window <= 0:
        raise ValueError("horizon and window must be positive")
    det = np.asarray(detection_times, dtype=float)
    bw = bin_width or window / 8
    nb = int(np.ceil(horizon / bw))
    if nb < 8 or horizon < 3 * window:
        raise InsufficientData("record too short for staircase detection")
    if len(det) == 0:
        return {"steps": 0, "step_times": [], "period": None, "z_threshold": z_threshold}
    if z_threshold is None:
        # upcrossings per unit time of Gaussian-smoothed white noise: exp(-z^2/2) / (2 pi sqrt(2) window)
        per_time = 1.0 / (2 * np.pi * np.sqrt(2) * window)
        z_threshold = float(np.sqrt(2 * np.log(max(per_time * horizon / false_alarm, 1.0))))
    counts, edges = np.histogram(det, bins=nb, range=(0, nb * bw))
    s_bins = window / bw
    smooth = ndimage.gaussian_filter1d(counts.astype(float), s_bins, mode="nearest")
    base = ndimage.median_filter(smooth, size=2 * int(8 * s_bins) + 1, mode="nearest")
    # variance of a Gaussian-smoothed Poisson series: mean / (2 sqrt(pi) sigma)
    noise = np.sqrt(np.maximum(base, 1e-12) / (2 * np.sqrt(np.pi) * s_bins))
    idx, props = signal.find_peaks(smooth, prominence=0.0)
    keep = (props["prominences"] > z_threshold * noise[idx]) & (smooth[idx] - base[idx] > z_threshold * noise[idx])
    idx = idx[keep]
    centres = 0.5 * (edges[:-1] + edges[1:])
    tk = centres[idx]
    period = float(np.median(np.diff(tk))) if len(tk) >= 2 else None
    return {"steps": int(len(tk)), "step_times": tk.tolist(), "period": period,
            "z_threshold": z_threshold}
