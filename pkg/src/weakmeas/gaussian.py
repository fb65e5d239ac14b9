"""Semiclassical Gaussian wave-packet model for odd-site probing, β = (1, 0).

The imbalance wavefunction is a Gaussian in ``z = (N_odd - N_even)/N`` with
width ``b2``, quadratic phase ``phi``, centre ``z0`` and linear phase ``c``.
Time is physical (``J`` carries the unit); the closed-form solution is
written in the dimensionless phase ``theta = J * zeta * omega * t``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import solve_ivp


class CausticError(ArithmeticError):
    """The closed-form denominator vanished at the reported time."""


@dataclass(frozen=True)
class GaussianParams:
    J: float = 1.0
    Gamma: float = 0.0
    h: float = 0.01
    Lambda: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.h < 1.0:
            raise ValueError(f"h must lie in (0, 1), got {self.h}")
        if self.Gamma < 0:
            raise ValueError("Gamma must be non-negative")
        if 1.0 + self.Lambda - self.h <= 0:
            raise ValueError("1 + Lambda - h must be positive")

    @property
    def omega(self) -> float:
        return 2.0 * np.sqrt(1.0 + self.Lambda - self.h)

    @classmethod
    def from_physical(cls, J: float, gamma: float, N: int, U: float = 0.0, M: int | None = None):
        """``Gamma = N gamma / 2``, ``h = 1/N``, ``Lambda = U N / M``."""
        Lam = 0.0 if U == 0 else U * N / M
        return cls(J=J, Gamma=N * gamma / 2.0, h=1.0 / N, Lambda=Lam)


@dataclass
class GaussianState:
    b2: float
    phi: float = 0.0
    z0: float = 0.0
    c: float = 0.0
    a: complex = 0j

    def __post_init__(self):
        # b2 = 0 is admitted as the zero-width limit; the flow itself needs b2 > 0
        if not self.b2 >= 0:
            raise ValueError(f"b2 must be non-negative, got {self.b2}")

    def vector(self) -> np.ndarray:
        return np.array([self.b2, self.phi, self.z0, self.c])

    @classmethod
    def from_vector(cls, v, a: complex = 0j) -> "GaussianState":
        return cls(float(v[0]), float(v[1]), float(v[2]), float(v[3]), a)


@dataclass
class PQState:
    p: complex
    q: complex


@dataclass
class StationaryPoint:
    alpha: float
    b2_inf: float
    phi_inf: float
    z0_inf: float
    c_inf: float
    eigenvalues: np.ndarray

    def state(self) -> GaussianState:
        return GaussianState(self.b2_inf, self.phi_inf, self.z0_inf, self.c_inf)


# ---------------------------------------------------------------- flow

def _rhs(v, P: GaussianParams, Gamma: float):
    # plain arithmetic so complex-step differentiation works
    b2, phi, z0, c = v[0], v[1], v[2], v[3]
    J, h, w2 = P.J, P.h, P.omega ** 2
    g = Gamma / (2 * h)
    return [
        8 * h * J * phi - g * b2 * b2,
        -(J * w2 / (4 * h)) * b2 - g * b2 * phi + (4 * h * J / b2) * (1 + phi * phi),
        -g * b2 * (1 + z0) + (2 * h * J / b2) * (2 * z0 * phi + c),
        -g * b2 * c + (4 * h * J / b2) * (phi * c - 2 * z0),
    ]


def derivatives(s: GaussianState, P: GaussianParams) -> GaussianState:
    """Time derivatives of ``(b2, phi, z0, c, a)``.

    Only ``Im(da/dt)`` (the norm decay) is returned in ``a``; the global
    phase is not tracked. The returned object carries derivatives, so its
    ``b2`` may be negative and validation is bypassed.
    """
    if s.b2 <= 0:
        raise ValueError("b2 must be positive")
    d = _rhs(s.vector(), P, P.Gamma)
    out = object.__new__(GaussianState)
    out.b2, out.phi, out.z0, out.c = (float(x) for x in d)
    out.a = 1j * norm_decay_rate(s, P)
    return out


def norm_decay_rate(s: GaussianState, P: GaussianParams) -> float:
    """``Im(da/dt)``; the norm decays as ``exp(-2 Im a)``."""
    return P.Gamma / (4 * P.h) * ((1 + s.z0) ** 2 + s.b2 / 2)


def integrate(s0: GaussianState, P: GaussianParams, t_eval, rtol: float = 1e-12,
              atol: float = 1e-14, method: str = "DOP853") -> np.ndarray:
    """Numerical flow of the four real equations; returns shape ``(len(t_eval), 4)``."""
    t_eval = np.asarray(t_eval, dtype=float)
    sol = solve_ivp(lambda t, v: _rhs(v, P, P.Gamma), (0.0, float(t_eval[-1])), s0.vector(),
                    method=method, t_eval=t_eval, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"Gaussian flow integration failed: {sol.message}")
    return sol.y.T


# ---------------------------------------------------------------- closed form

def to_pq(s: GaussianState) -> PQState:
    return PQState((1 - 1j * s.phi) / s.b2, (s.z0 + 0.5j * s.c) / s.b2)


def from_pq(pq: PQState) -> GaussianState:
    rp = pq.p.real
    if rp <= 0:
        raise ValueError("Re(p) must be positive for a normalisable Gaussian")
    return GaussianState(1.0 / rp, -pq.p.imag / rp, pq.q.real / rp, 2 * pq.q.imag / rp)


def _zeta(P: GaussianParams) -> complex:
    # branch with Im >= 0 keeps exp(2 i theta) bounded for t > 0
    z = np.sqrt(1 - 2j * P.Gamma / (P.J * P.omega ** 2) + 0j)
    return -z


def analytic_pq(t, p0: complex, q0: complex, P: GaussianParams):
    """Closed-form ``(p(t), q(t))``; ``t`` may be an array."""
    if P.J * P.omega == 0:
        raise ValueError("closed form needs J * omega != 0")
    t = np.asarray(t, dtype=float)
    h, w, G = P.h, P.omega, P.Gamma / P.J
    zeta = _zeta(P)
    zw = zeta * w
    theta = P.J * zw * t
    e1 = np.exp(1j * theta)
    e2 = e1 * e1
    ap, am = zw + 4 * h * p0, zw - 4 * h * p0
    denom = ap * e2 + am
    bad = np.abs(denom) < 1e-12 * max(abs(ap), abs(am))
    if np.any(bad):
        raise CausticError(f"vanishing denominator at t = {np.atleast_1d(t)[np.atleast_1d(bad)][0]}")
    p = (zw / (4 * h)) * (ap * e2 - am) / denom
    A = 1j * G * (ap * e2 - am) + (4 * h * zw * zw * q0 - 8j * h * G * p0) * e1
    q = A / (2 * h * zw * denom)
    return p, q


def analytic_state(t, s0: GaussianState, P: GaussianParams) -> np.ndarray:
    """Closed-form ``(b2, phi, z0, c)`` at times ``t``; shape ``(len(t), 4)``."""
    pq = to_pq(s0)
    p, q = analytic_pq(np.atleast_1d(t), pq.p, pq.q, P)
    rp = p.real
    return np.column_stack([1 / rp, -p.imag / rp, q.real / rp, 2 * q.imag / rp])


# ---------------------------------------------------------------- stability

def alpha(P: GaussianParams) -> float:
    r = 2 * P.Gamma / (P.J * P.omega ** 2)
    # rationalised form of -1/2 + sqrt(1 + r^2)/2, free of cancellation at small r
    return float(np.sqrt(r * r / (2 * (1 + np.sqrt(1 + r * r)))))


def stationary_point(P: GaussianParams) -> StationaryPoint:
    J, h, w, G = P.J, P.h, P.omega, P.Gamma
    if G == 0:
        ev = 1j * J * w * np.array([1, -1, 2, -2])
        return StationaryPoint(0.0, 4 * h / w, 0.0, 0.0, 0.0, ev)
    al = alpha(P)
    lam = np.array([1j * G / (w * al) - J * w * al, -1j * G / (w * al) - J * w * al,
                    2j * G / (w * al) - 2 * J * w * al, -2j * G / (w * al) - 2 * J * w * al])
    return StationaryPoint(
        alpha=al,
        b2_inf=4 * h * J * w * al / G,
        phi_inf=J * w * w * al * al / G,
        z0_inf=-2 * al * al / (2 * al * al + 1),
        c_inf=4 * G / (J * w * w * (2 * al * al + 1)),
        eigenvalues=lam,
    )


def jacobian_numeric(s: GaussianState, P: GaussianParams, flow=None) -> np.ndarray:
    """Jacobian of ``(b2, phi, z0, c)`` by complex-step differentiation.

    The right-hand sides are rational in the state, so the complex step is
    exact to rounding with no cancellation.
    """
    if s.b2 <= 0:
        raise ValueError("b2 must be positive")
    f = flow or (lambda v: _rhs(v, P, P.Gamma))
    x = s.vector().astype(complex)
    step = 1e-30
    Jm = np.empty((4, 4))
    for k in range(4):
        xk = x.copy()
        xk[k] += 1j * step
        Jm[:, k] = np.imag(np.array(f(xk))) / step
    return Jm


def regime_timescales(P: GaussianParams) -> dict:
    if P.Gamma <= 0:
        raise ValueError("regime timescales need Gamma > 0")
    al, w = alpha(P), P.omega
    Om = 2 * P.Gamma / (w * al)
    td = 1 / (2 * P.J * w * al)
    tj = 2 * P.h / P.Gamma
    return {"Omega": Om, "dt_damp": td, "dt_jump": tj,
            "Omega_dt_damp": Om * td, "Omega_dt_jump": Om * tj}


def stability_report(P: GaussianParams) -> dict:
    sp = stationary_point(P)
    out = {"params": asdict(P), "omega": P.omega,
           "stationary": {"alpha": sp.alpha, "b2": sp.b2_inf, "phi": sp.phi_inf,
                          "z0": sp.z0_inf, "c": sp.c_inf},
           "eigenvalues": [[float(z.real), float(z.imag)] for z in sp.eigenvalues]}
    if P.Gamma > 0:
        out["timescales"] = regime_timescales(P)
        out["jacobian_eigenvalues"] = [
            [float(z.real), float(z.imag)]
            for z in np.linalg.eigvals(jacobian_numeric(sp.state(), P))]
    return out


def potential(z, P: GaussianParams, harmonic: bool = False):
    """Effective real potential in units of ``J`` (diagnostic only)."""
    z = np.asarray(z, dtype=float)
    if harmonic:
        return P.J * (-1 - P.h + P.omega ** 2 * z * z / 8)
    u = 1 - z * z
    return -P.J * np.sqrt(u) * (1 + P.h / u - P.h ** 2 * (1 + z * z) / u ** 2)


# ---------------------------------------------------------------- jumps

def jump_map(s: GaussianState, allow_overshoot: bool = False) -> GaussianState:
    """Effect of one detected photon on the Gaussian parameters.

    The map expands ``log(1 + z)`` around ``z0``. A packet whose centre has
    overshot below ``z = -1`` (possible in the over-damped flow) is handled
    with ``allow_overshoot``: expanding ``log|1 + z|`` gives the same
    formulas, since the sign of the jump factor is a global phase.
    """
    u = 1 + s.z0
    if u == 0 or (u < 0 and not allow_overshoot):
        raise ValueError("jump impossible with an empty odd mode (z0 <= -1)")
    u2 = u * u
    f = u2 / (u2 + s.b2)
    return GaussianState(s.b2 * f, s.phi * f, s.z0 + s.b2 * u / (u2 + s.b2), s.c * f, s.a)


def jump_rate(s: GaussianState, P: GaussianParams) -> float:
    return P.Gamma / (2 * P.h) * ((1 + s.z0) ** 2 + s.b2 / 2)


def jump_probability(s: GaussianState, P: GaussianParams, dt: float) -> float:
    return jump_rate(s, P) * dt


def exponent_difference(P: GaussianParams, b2: float, regime: str = "weak") -> float:
    """Jump-driven growth exponent minus the damping exponent of ``z0``."""
    if regime == "weak":
        return P.Gamma * (b2 / (2 * P.h) - 1 / P.omega)
    if regime == "strong":
        return P.Gamma * (b2 / (2 * P.h) - 1 / np.sqrt(P.J * P.Gamma))
    raise ValueError(f"unknown regime {regime!r}")


def mean_jump_flow(s: GaussianState, P: GaussianParams) -> tuple[float, float]:
    """Average drift of ``(b2, z0)`` produced by the photocurrent alone."""
    g = P.Gamma / (2 * P.h)
    br = 1 - 0.5 * s.b2 / ((s.z0 + 1) ** 2 + s.b2)
    return -g * s.b2 ** 2 * br, g * s.b2 * (s.z0 + 1) * br


def combined_flow(v, P: GaussianParams):
    """Averaged system: non-Hermitian flow plus mean jumps, first order in ``h``."""
    b2, phi, z0, c = v[0], v[1], v[2], v[3]
    J, h, w2 = P.J, P.h, P.omega ** 2
    g = P.Gamma / h
    return [
        8 * h * J * phi - g * b2 * b2,
        -(J * w2 / (4 * h)) * b2 - g * b2 * phi + (4 * h * J / b2) * (1 + phi * phi),
        (2 * h * J / b2) * (2 * z0 * phi + c),
        -g * b2 * c + (4 * h * J / b2) * (phi * c - 2 * z0),
    ]


def combined_stationary_width(P: GaussianParams) -> tuple[float, float]:
    """``(b2, phi)`` where the averaged width equations balance."""
    from scipy.optimize import fsolve

    def f(x):
        d = combined_flow([x[0], x[1], 0.0, 0.0], P)
        return [d[0], d[1]]

    sp = stationary_point(P)
    x0 = [sp.b2_inf, sp.phi_inf] if P.Gamma > 0 else [4 * P.h / P.omega, 0.0]
    b2, phi = fsolve(f, x0, xtol=1e-14)
    return float(b2), float(phi)


# ---------------------------------------------------------------- trajectories

@dataclass
class GaussianRecord:
    times: np.ndarray
    states: np.ndarray          # (n, 4): b2, phi, z0, c
    rates: np.ndarray           # (n, 4): d/dt of the same
    jump_times: np.ndarray
    seed: int | None = None
    config_hash: str | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def jsonl_lines(self, J: float = 1.0):
        counts = np.searchsorted(self.jump_times, self.times, side="right")
        for k, t in enumerate(self.times):
            b2, phi, z0, c = self.states[k]
            row = {"t": float(t * J), "b2": float(b2), "phi": float(phi), "z0": float(z0),
                   "c": float(c), "b2_dot": float(self.rates[k, 0] / J),
                   "z0_dot": float(self.rates[k, 2] / J), "jumps": int(counts[k])}
            yield json.dumps(row, separators=(",", ":"))

    def summary(self, J: float = 1.0) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash,
                "jump_times": [float(t * J) for t in self.jump_times], "n_jumps": self.n_jumps}


def run_gaussian_trajectory(P: GaussianParams, horizon: float, sample_dt: float,
                            rng: np.random.Generator | int | None = None,
                            b2_0: float | None = None, z0_0: float = 0.0,
                            jumps="stochastic", flow_gamma: float | None = None,
                            p_max: float = 0.01, seed=None,
                            config_hash: str | None = None) -> GaussianRecord:
    """Closed-form flow punctuated by jumps.

    ``jumps`` is ``"stochastic"`` (Bernoulli draws on a grid fine enough that
    the per-step probability stays below ``p_max``), ``"none"``, or an array
    of forced jump times. ``flow_gamma`` overrides the ``Gamma`` used in the
    deterministic flow (e.g. 0 for Hermitian flow with forced jumps), while
    the jump probability always uses ``P.Gamma``. Times are physical.
    """
    if not isinstance(rng, np.random.Generator):
        seed = rng if seed is None else seed
        rng = np.random.default_rng(rng)
    Pf = P if flow_gamma is None else GaussianParams(P.J, flow_gamma, P.h, P.Lambda)
    nsamp = int(round(horizon / sample_dt)) + 1
    times = np.arange(nsamp) * sample_dt
    states = np.empty((nsamp, 4))
    s = GaussianState(2 * P.h if b2_0 is None else b2_0, 0.0, z0_0, 0.0)

    forced = None
    if not isinstance(jumps, str):
        forced = np.sort(np.asarray(jumps, dtype=float))
        jumps = "forced"
    elif jumps not in ("stochastic", "none"):
        raise ValueError(f"unknown jump mode {jumps!r}")
    if jumps == "stochastic" and P.Gamma == 0:
        jumps = "none"

    jump_times: list[float] = []
    t_seg, k_next = 0.0, 0
    fi = 0
    chunk = 512
    while k_next < nsamp:
        # next jump time measured from t_seg, or inf
        if jumps == "forced":
            while fi < len(forced) and forced[fi] < t_seg:
                fi += 1
            tau = forced[fi] - t_seg if fi < len(forced) else np.inf
            if tau == 0 and jump_times and jump_times[-1] == t_seg:
                tau = np.inf
        elif jumps == "stochastic":
            tau = _bernoulli_wait(s, P, Pf, rng, p_max, chunk, times[-1] - t_seg)
        else:
            tau = np.inf
        t_jump = t_seg + tau
        # record every sample strictly before the jump (or all remaining)
        k_end = k_next
        while k_end < nsamp and times[k_end] < t_jump:
            k_end += 1
        if k_end > k_next:
            states[k_next:k_end] = _flow(times[k_next:k_end] - t_seg, s, Pf)
            k_next = k_end
        if not np.isfinite(t_jump) or t_jump > times[-1]:
            break
        pre = GaussianState.from_vector(_flow(np.array([tau]), s, Pf)[0])
        s = jump_map(pre, allow_overshoot=True)
        t_seg = t_jump
        jump_times.append(t_jump)
        if jumps == "forced":
            fi += 1
    rates = np.array([_rhs(v, Pf, Pf.Gamma) for v in states])
    return GaussianRecord(times, states, rates, np.asarray(jump_times), seed=seed,
                          config_hash=config_hash)


def _flow(tau, s: GaussianState, P: GaussianParams) -> np.ndarray:
    if P.J == 0:
        # pure squeezing: b2 = b2_0 / (1 + g b2_0 t); z0 relaxes towards -1
        g = P.Gamma / (2 * P.h)
        b2 = s.b2 / (1 + g * s.b2 * tau)
        ratio = b2 / s.b2
        return np.column_stack([b2, s.phi * ratio, -1 + (1 + s.z0) * ratio, s.c * ratio])
    return analytic_state(tau, s, P)


def _bernoulli_wait(s, P, Pf, rng, p_max, chunk, remaining) -> float:
    """First grid point where a Bernoulli(p) draw succeeds, grid adapted so p < p_max."""
    dt = p_max / max(jump_rate(s, P), 1e-300)
    t0 = 0.0
    while t0 <= remaining:
        grid = t0 + dt * np.arange(1, chunk + 1)
        st = _flow(grid, s, Pf)
        rate = P.Gamma / (2 * P.h) * ((1 + st[:, 2]) ** 2 + st[:, 0] / 2)
        if rate.max() * dt > p_max:
            dt = 0.5 * p_max / rate.max()
            continue
        u = rng.random(chunk)
        hit = np.flatnonzero(u < rate * dt)
        if len(hit):
            return float(grid[hit[0]])
        t0 = grid[-1]
        # widen the step again when the rate has dropped
        dt = min(2 * dt, p_max / max(rate[-1], 1e-300))
    return np.inf
