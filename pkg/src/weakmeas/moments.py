"""Gaussian-closed stochastic equations for the collective moments.

State: ``n = <N_odd>``, ``d = <Delta>``, ``vn = var N_odd``, ``vd = var Delta``
and ``cov`` (symmetrised covariance), with ``Delta = i(b^dag a - a^dag b)``
so that tunneling alone gives ``dn/dt = -J d`` and ``dd/dt = -2J(N - 2n)``.
Every function works on scalars or on arrays of trajectories.

Under pure tunneling the imbalance and current obey linear (SU(2)) Heisenberg
equations, which fixes the tunneling term of ``vd`` to ``+8 J cov``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .analysis import spectral_peak

MAX_HALVINGS = 10   # step floor dt / 1024


class MomentStepError(RuntimeError):
    pass


class NoiseMode(str, Enum):
    JUMP = "jump"
    DIFFUSION = "diffusion"
    DETERMINISTIC = "deterministic"


@dataclass
class MomentState:
    n_odd: np.ndarray | float
    delta: np.ndarray | float
    var_n: np.ndarray | float
    var_d: np.ndarray | float
    cov: np.ndarray | float

    def as_array(self) -> np.ndarray:
        return np.array([self.n_odd, self.delta, self.var_n, self.var_d, self.cov], dtype=float)

    @classmethod
    def from_array(cls, x) -> "MomentState":
        x = np.asarray(x, dtype=float)
        return cls(x[0], x[1], x[2], x[3], x[4])

    def violations(self, N: float | None = None, tol: float = 1e-12) -> np.ndarray:
        """Boolean mask of samples breaking positivity or Cauchy-Schwarz."""
        x = self.as_array()
        bad = (x[2] < -tol) | (x[3] < -tol) | (x[4] ** 2 > x[2] * x[3] * (1 + 1e-9) + tol)
        if N is not None:
            bad |= (x[0] < -tol) | (x[0] > N + tol)
        return np.asarray(bad)


def initial_moments(N: int) -> MomentState:
    """Moments of the balanced two-mode superfluid."""
    return MomentState(N / 2, 0.0, N / 4, float(N), 0.0)


def delta_operator(op) -> np.ndarray:
    """Dense current operator ``-(i/J)[H, N_odd]`` on the partition basis."""
    H = op.H.toarray()
    n = op.occ[:, 0].astype(float)
    return -1j / op.J * (H * n[None, :] - n[:, None] * H)


def moments_from_state(psi, op) -> MomentState:
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    n = op.occ[:, 0].astype(float)
    D = delta_operator(op)
    p = np.abs(psi) ** 2
    Dpsi = D @ psi
    m = p @ n
    d = np.vdot(psi, Dpsi).real
    vn = p @ n ** 2 - m * m
    vd = np.vdot(Dpsi, Dpsi).real - d * d
    cov = np.vdot(n * psi, Dpsi).real - m * d
    return MomentState(m, d, vn, vd, cov)


# ---------------------------------------------------------------- closure

def gaussian_moment(k: int, mu, var):
    """``E[X^k]`` for a Gaussian, by the recursion ``m_k = mu m_{k-1} + (k-1) var m_{k-2}``."""
    if k < 0:
        raise ValueError("order must be non-negative")
    prev, cur = np.ones_like(np.asarray(mu, dtype=float)), np.asarray(mu, dtype=float)
    if k == 0:
        return prev
    for j in range(2, k + 1):
        prev, cur = cur, mu * cur + (j - 1) * var * prev
    return cur


def gaussian_joint_moment(a: int, b: int, mean, cov) -> float:
    """``E[X^a Y^b]`` for a bivariate Gaussian (``cov`` is the 2x2 matrix)."""
    mx, my = mean
    sxx, sxy, syy = cov[0][0], cov[0][1], cov[1][1]
    memo: dict = {}

    def m(i, j):
        if i < 0 or j < 0:
            return 0.0
        if i == 0 and j == 0:
            return 1.0
        key = (i, j)
        if key not in memo:
            if i > 0:
                memo[key] = mx * m(i - 1, j) + (i - 1) * sxx * m(i - 2, j) + j * sxy * m(i - 1, j - 1)
            else:
                memo[key] = my * m(0, j - 1) + (j - 1) * syy * m(0, j - 2)
        return memo[key]

    return m(a, b)


def gaussian_closure(mu, var) -> dict:
    """Third and fourth raw moments used to close the hierarchy."""
    return {"m3": mu ** 3 + 3 * mu * var, "m4": mu ** 4 + 6 * mu ** 2 * var + 3 * var ** 2}


# ---------------------------------------------------------------- closed equations

def jump_increments(x, gamma: float = 0.0):
    """Change of the five moments caused by one detection (closed form)."""
    n, d, vn, vd, cov = x
    return np.array([2 * vn / n, 2 * cov / n, -2 * vn ** 2 / n ** 2,
                     -2 * cov ** 2 / n ** 2, 2 * cov * vn / n ** 2])


def jump_drift(x, J: float, gamma: float, N: float):
    """Deterministic (no-detection) part of the closed jump system."""
    n, d, vn, vd, cov = x
    return np.array([
        -(J * d + 2 * gamma * n * vn),
        -2 * (J * (N - 2 * n) + gamma * n * cov),
        -2 * (J * cov + gamma * vn ** 2),
        2 * (4 * J * cov - gamma * cov ** 2),
        J * (4 * vn - vd) - 2 * gamma * vn * cov,
    ])


def diffusion_drift(x, J: float, gamma: float, N: float):
    n, d, vn, vd, cov = x
    return np.array([
        -J * d + 0 * n,
        -2 * J * (N - 2 * n),
        -2 * (J * cov + 2 * gamma * vn ** 2),
        4 * (2 * J * cov - gamma * cov ** 2),
        J * (4 * vn - vd),
    ])


def diffusion_noise(x, gamma: float):
    n, d, vn, vd, cov = x
    s = 2 * np.sqrt(gamma)
    return np.array([s * vn + 0 * n, s * cov, -s * vn ** 2 / n, -s * cov ** 2 / n, s * cov * vn / n])


def closed_jump_step(m: MomentState, dt: float, J: float, gamma: float, N: float,
                     rng: np.random.Generator) -> tuple[MomentState, np.ndarray]:
    """Itô step of the point-process system; returns the new state and the jump mask.

    Failing samples (negative variance or Cauchy-Schwarz violation) are
    retried with halved steps down to ``dt / 1024``.
    """
    x = np.atleast_2d(m.as_array().T).T if np.ndim(m.n_odd) else m.as_array()[:, None]
    out, jumps = _advance(x, dt, J, gamma, N, rng, NoiseMode.JUMP, 0)
    if np.ndim(m.n_odd) == 0:
        return MomentState.from_array(out[:, 0]), jumps[:1]
    return MomentState.from_array(out), jumps


def diffusion_step(m: MomentState, dt: float, J: float, gamma: float, N: float,
                   rng: np.random.Generator) -> MomentState:
    """Euler-Maruyama step with a single Wiener increment shared by all five moments."""
    x = np.atleast_2d(m.as_array().T).T if np.ndim(m.n_odd) else m.as_array()[:, None]
    out, _ = _advance(x, dt, J, gamma, N, rng, NoiseMode.DIFFUSION, 0)
    return MomentState.from_array(out[:, 0] if np.ndim(m.n_odd) == 0 else out)


def _raw_step(x, dt, J, gamma, N, rng, mode):
    S = x.shape[1]
    jumps = np.zeros(S, dtype=int)
    if mode == NoiseMode.JUMP:
        p = gamma * x[0] ** 2 * dt
        if np.any(p >= 0.1):
            raise MomentStepError(f"jump probability {p.max():.3f} per step exceeds 0.1")
        jumps = (rng.random(S) < p).astype(int)
        if np.any(jumps & (x[0] <= 0)):
            raise MomentStepError("detection with an empty odd mode")
        inc = np.zeros_like(x)
        if jumps.any():
            inc[:, jumps == 1] = jump_increments(x[:, jumps == 1])
        return x + inc + jump_drift(x, J, gamma, N) * dt, jumps
    if mode == NoiseMode.DIFFUSION:
        dW = rng.normal(0.0, np.sqrt(dt), S)
        return x + diffusion_drift(x, J, gamma, N) * dt + diffusion_noise(x, gamma) * dW, jumps
    return x + diffusion_drift(x, J, gamma, N) * dt, jumps


def _advance(x, dt, J, gamma, N, rng, mode, depth):
    new, jumps = _raw_step(x, dt, J, gamma, N, rng, mode)
    bad = MomentState.from_array(new).violations()
    if not bad.any():
        return new, jumps
    if depth >= MAX_HALVINGS:
        raise MomentStepError(f"closure breakdown: negative variance or Cauchy-Schwarz violation "
                              f"persists at dt/{2 ** depth}")
    sub = x[:, bad]
    sub, j1 = _advance(sub, dt / 2, J, gamma, N, rng, mode, depth + 1)
    sub, j2 = _advance(sub, dt / 2, J, gamma, N, rng, mode, depth + 1)
    new[:, bad] = sub
    jumps[bad] = j1 + j2
    return new, jumps


@dataclass
class MomentRecord:
    times: np.ndarray
    states: np.ndarray            # (S, n_samples, 5)
    jump_counts: np.ndarray       # (S, n_samples)
    mode: str
    seed: int | None = None
    config_hash: str | None = None
    extras: dict = field(default_factory=dict)

    def jsonl_lines(self, index: int = 0, J: float = 1.0):
        names = ("n_odd", "delta", "var_n", "var_d", "cov")
        for k, t in enumerate(self.times):
            row = {"t": float(t * J)}
            row.update({nm: float(v) for nm, v in zip(names, self.states[index, k])})
            row["jumps"] = int(self.jump_counts[index, k])
            yield json.dumps(row, separators=(",", ":"))


def run_moments(N: int, J: float, gamma: float, horizon: float, sample_dt: float, n_traj: int = 1,
                mode: NoiseMode | str = NoiseMode.JUMP, rng: np.random.Generator | int | None = None,
                dt: float | None = None, p_max: float = 0.01, initial: MomentState | None = None,
                seed=None, config_hash: str | None = None) -> MomentRecord:
    """Ensemble of ``n_traj`` moment trajectories advanced in lock-step.

    The default step keeps ``gamma N^2 dt <= p_max`` (the largest possible
    jump probability) and resolves the tunneling period.
    """
    mode = NoiseMode(mode)
    if not isinstance(rng, np.random.Generator):
        seed = rng if seed is None else seed
        rng = np.random.default_rng(rng)
    if dt is None:
        dt = min(sample_dt, 0.01 / max(J, 1e-300))
        if gamma > 0:
            dt = min(dt, p_max / (gamma * N * N))
    nsub = max(1, int(np.ceil(sample_dt / dt - 1e-9)))
    dt = sample_dt / nsub
    nsamp = int(round(horizon / sample_dt)) + 1
    x0 = (initial or initial_moments(N)).as_array()
    x = np.repeat(np.asarray(x0, dtype=float)[:, None], n_traj, axis=1)
    states = np.empty((n_traj, nsamp, 5))
    counts = np.zeros((n_traj, nsamp), dtype=int)
    states[:, 0] = x.T
    total = np.zeros(n_traj, dtype=int)
    for k in range(1, nsamp):
        for _ in range(nsub):
            x, j = _advance(x, dt, J, gamma, N, rng, mode, 0)
            total += j
        states[:, k] = x.T
        counts[:, k] = total
    return MomentRecord(np.arange(nsamp) * sample_dt, states, counts, mode.value, seed=seed,
                        config_hash=config_hash)


def integrate_deterministic(m0: MomentState, J: float, gamma: float, N: float, times,
                            rtol: float = 1e-11, atol: float = 1e-11) -> np.ndarray:
    """Noise-off diffusion system by an adaptive integrator; shape ``(len(times), 5)``."""
    from scipy.integrate import solve_ivp
    sol = solve_ivp(lambda t, y: diffusion_drift(y, J, gamma, N), (0, float(times[-1])),
                    m0.as_array(), t_eval=times, rtol=rtol, atol=atol, method="DOP853")
    if not sol.success:
        raise MomentStepError(sol.message)
    return sol.y.T


def harmonic_invariant(x, J: float, N: float):
    """``4 J^2 (n - N/2)^2 + J^2 d^2``, conserved when ``gamma = 0``."""
    x = np.asarray(x)
    return 4 * J ** 2 * (x[..., 0] - N / 2) ** 2 + J ** 2 * x[..., 1] ** 2


# ---------------------------------------------------------------- Stratonovich check

def stratonovich_explicit_drift(x, J: float, gamma: float, N: float):
    """Stratonovich drift with every nested time derivative dropped."""
    n, d, vn, vd, cov = x
    return np.array([
        -J * d,
        -2 * J * (N - 2 * n),
        -2 * (J * cov + 2 * gamma * vn ** 2) / (1 - 2 * gamma * vn / n ** 2),
        4 * (2 * J * cov - gamma * cov ** 2),
        J * (4 * vn - vd) / (1 + gamma * vn ** 2 / n ** 2),
    ])


def stratonovich_noise(x, gamma: float):
    """Coefficients of the white noise in the Stratonovich form, leading order."""
    return diffusion_noise(x, gamma)


def ito_to_stratonovich_drift(x, J: float, gamma: float, N: float):
    """``a - (1/2) (dg/dx) g`` for the diffusion system (complex-step Jacobian)."""
    x = np.asarray(x, dtype=float)
    g = diffusion_noise(x, gamma)
    step = 1e-30
    corr = np.zeros(5)
    for k in range(5):
        xk = x.astype(complex)
        xk[k] += 1j * step
        corr += np.imag(diffusion_noise(xk, gamma)) / step * g[k]
    return diffusion_drift(x, J, gamma, N) - 0.5 * corr


def stratonovich_drift_check(m: MomentState, J: float, gamma: float, N: float) -> float:
    """Relative residual between the converted Itô drift and the explicit Stratonovich drift."""
    x = m.as_array()
    a = ito_to_stratonovich_drift(x, J, gamma, N)
    b = stratonovich_explicit_drift(x, J, gamma, N)
    scale = np.linalg.norm(diffusion_drift(x, J, gamma, N))
    return float(np.linalg.norm(a - b) / max(scale, 1e-300))


# ---------------------------------------------------------------- diagnostics

def forced_oscillator_diagnostic(times, n_odd, N: float, J: float) -> dict:
    """Spectral peak of ``n_odd(t)`` and the residual force ``n'' - 2 J^2 (N - 2 n)``."""
    t = np.asarray(times, dtype=float)
    n = np.asarray(n_odd, dtype=float)
    if len(t) < 16:
        raise ValueError("too few samples for the forced-oscillator diagnostic")
    acc = np.gradient(np.gradient(n, t), t)
    F = acc - 2 * J ** 2 * (N - 2 * n)
    return {"frequency": spectral_peak(t, n), "F": F[2:-2], "t": t[2:-2],
            "F_rms": float(np.sqrt(np.mean(F[2:-2] ** 2)))}


def ehrenfest_increments(psi, op, O) -> tuple[float, float]:
    """Generalised Ehrenfest theorem: (jump change, drift rate) of ``<O>``.

    ``O`` is a dense Hermitian matrix on the partition basis.
    """
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    H = op.H.toarray()
    c = np.sqrt(op.gamma) * op.jump
    cc = np.abs(c) ** 2
    e = lambda A: np.vdot(psi, A @ psi)
    mean_cc = float(cc @ np.abs(psi) ** 2)
    Oexp = e(O).real
    cpsi = c * psi
    jump = np.vdot(cpsi, O @ cpsi).real / mean_cc - Oexp if mean_cc > 0 else 0.0
    comm = H @ O - O @ H
    anti = cc[:, None] * O + O * cc[None, :]
    drift = (1j * e(comm) - 0.5 * e(anti) + Oexp * mean_cc).real
    return float(jump), float(drift)


def open_hierarchy(psi, op) -> dict:
    """Open (unclosed) moment equations evaluated from raw expectation values.

    Returns per moment the jump change and the drift rate, written in terms
    of raw moments of ``N_odd`` and ``Delta``.
    """
    psi = np.asarray(psi, dtype=complex)
    psi = psi / np.linalg.norm(psi)
    J, g = op.J, op.gamma
    nvec = op.occ[:, 0].astype(float)
    Nn = float(op.N)
    D = delta_operator(op)
    Nm = np.diag(nvec).astype(complex)
    e = lambda A: np.vdot(psi, A @ psi).real
    n1, n2, n3, n4 = (e(np.diag(nvec ** k)) for k in range(1, 5))
    N2 = np.diag(nvec ** 2)
    d1 = e(D)
    D2 = D @ D
    d2 = e(D2)
    ND = e(Nm @ D + D @ Nm) / 2
    NDN = e(Nm @ D @ Nm)
    N2D = e(N2 @ D + D @ N2) / 2
    ND2N = e(Nm @ D2 @ Nm)
    N2D2 = e(N2 @ D2 + D2 @ N2) / 2
    ND3 = e(N2 @ D @ Nm + D @ Nm @ Nm @ Nm) / 2   # <N^2 D N> + <D N^3> halves
    NDN2 = e(Nm @ D @ N2 + N2 @ D @ Nm) / 2
    out = {}
    out["n_odd"] = (n3 / n2 - n1, -J * d1 - g * (n3 - n1 * n2))
    out["delta"] = (NDN / n2 - d1, -2 * J * (Nn - 2 * n1) - g * (N2D - d1 * n2))
    out["var_n"] = ((n4 * n2 - n3 ** 2) / n2 ** 2 - (n2 - n1 ** 2),
                    -J * (2 * ND - 2 * d1 * n1)
                    - 0.5 * g * (2 * n4 - 4 * n1 * n3 - 2 * n2 ** 2 + 4 * n2 * n1 ** 2))
    out["var_d"] = ((ND2N * n2 - NDN ** 2) / n2 ** 2 - (d2 - d1 ** 2),
                    4 * J * (2 * ND - 2 * d1 * n1)
                    - 0.5 * g * (2 * N2D2 - 4 * d1 * N2D - 2 * n2 * (d2 - 2 * d1 ** 2)))
    out["cov"] = ((NDN2 * n2 - NDN * n3) / n2 ** 2 - (ND - d1 * n1),
                  -J * (d2 - d1 ** 2 + 4 * n1 ** 2 - 4 * n2)
                  - 0.5 * g * (2 * ND3 - 2 * d1 * n3 - n1 * 2 * N2D - 2 * n2 * (ND - 2 * d1 * n1)))
    return out


# ---------------------------------------------------------------- cross-model mapping

def cross_model_consistency(N: int, gamma: float, J: float = 1.0, b2: float = 0.03,
                            z0: float = 0.1) -> dict:
    """Compare measurement terms of the moment and Gaussian equations.

    Candidates: ``n_odd = N(1+z0)`` or ``N(1+z0)/2``, and ``var_n = k N^2 b2``
    with ``k = 2`` or ``1/8``. For each, residuals of the ``gamma`` terms of
    ``dn/dt`` and ``d var_n/dt`` and of the jump-rate identity
    ``gamma <N_odd^2> = (Gamma/2h)[(1+z0)^2 + b2/2]`` are reported.
    """
    Gamma, h = N * gamma / 2, 1.0 / N
    g = Gamma / (2 * h)
    db2 = -g * b2 ** 2
    dz0 = -g * b2 * (1 + z0)
    rate_gauss = g * ((1 + z0) ** 2 + b2 / 2)
    rows = []
    for n_label, a in (("N(1+z0)", 1.0), ("N(1+z0)/2", 0.5)):
        for k_label, k in (("2", 2.0), ("1/8", 0.125)):
            n = a * N * (1 + z0)
            vn = k * N ** 2 * b2
            r_n = (-2 * gamma * n * vn) - a * N * dz0
            r_v = (-2 * gamma * vn ** 2) - k * N ** 2 * db2
            r_rate = gamma * (n ** 2 + vn) - rate_gauss
            scale = abs(a * N * dz0) + abs(k * N ** 2 * db2) + rate_gauss
            res = (abs(r_n) + abs(r_v) + abs(r_rate)) / scale
            rows.append({"n_map": n_label, "k": k_label,
                         "residual_dn": r_n / abs(a * N * dz0), "residual_dvar": r_v / abs(k * N ** 2 * db2),
                         "residual_rate": r_rate / rate_gauss, "residual": res,
                         "measurement_ratio": (-2 * gamma * vn ** 2) / (k * N ** 2 * db2)})
    best = min(rows, key=lambda r: r["residual"])
    return {"candidates": rows, "winner": {"n_map": best["n_map"], "k": best["k"]},
            "winner_residual": best["residual"]}
