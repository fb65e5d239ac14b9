"""Exact quantum trajectories in the mode-reduced subspace.

The reduced basis is the set of products of per-mode superfluids labelled by
occupation partitions ``(N_1, ..., N_R)``; jumps are diagonal in it and, at
``U = 0``, tunneling never leaves it. :func:`oracle_model` builds the same
problem in the full Fock space for brute-force comparison.

Time evolution between photocounts follows ``i d/dt psi = H_eff psi`` with
``H_eff = H - (i/2) c^dag c`` and ``c = sqrt(gamma) * sum_j beta_j N_j``. The
next jump happens when the squared norm hits a uniform random number.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.optimize import brentq
from scipy.special import gammaln

from .geometry import LatticeSpec, MeasurementGeometry

# Taylor terms are dropped once they fall below this fraction of the state norm
TAYLOR_TOL = 1e-16
MAX_TAYLOR_TERMS = 80
# bound on ||H|| * step; keeps the series short and well conditioned
STEP_THETA = 1.0
DENSE_PROPAGATOR_MAX_DIM = 2000


class IntegrationError(RuntimeError):
    pass


class ZeroProbabilityJump(RuntimeError):
    """The jump operator annihilates the state."""


# ---------------------------------------------------------------------------
# partition basis
# ---------------------------------------------------------------------------

def partitions(N: int, R: int) -> np.ndarray:
    """All ``(N_1, ..., N_R)`` with sum ``N``, colexicographic in ``(N_1..N_{R-1})``.

    Row ``k`` is basis state ``k``. For ``R = 2`` the index equals ``N_1``.
    """
    if R < 1 or N < 0:
        raise ValueError("need R >= 1 and N >= 0")
    if R == 1:
        return np.array([[N]], dtype=int)
    rows = []

    # colex: the last free coordinate varies slowest
    def rec_colex(suffix, remaining, depth):
        if depth == 0:
            return
        for n in range(remaining + 1):
            if depth == 1:
                rows.append([n] + suffix + [remaining - n])
            else:
                rec_colex([n] + suffix, remaining - n, depth - 1)

    rec_colex([], N, R - 1)
    return np.array(rows, dtype=int)


def partition_dim(N: int, R: int) -> int:
    return math.comb(N + R - 1, R - 1)


def mode_hopping(geom: MeasurementGeometry, J: float) -> np.ndarray:
    """Effective inter-mode tunneling amplitudes ``t_ij = (J/2) sqrt(n_ij n_ji)``.

    ``n_ij`` are the neighbour multiplicities from the coupling graph. The
    per-bond amplitude ``J/2`` makes the even/odd chain reduce to a double
    well with amplitude exactly ``J``.
    """
    if geom.coupling is None:
        raise ValueError("geometry has no coupling graph")
    n = geom.coupling.astype(float)
    t = 0.5 * J * np.sqrt(n * n.T)
    np.fill_diagonal(t, 0.0)
    return t


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

@dataclass
class EffectiveOperator:
    """A jump model with a diagonal jump operator.

    ``H`` is the Hermitian part, ``jump`` the diagonal of ``c / sqrt(gamma)``
    and ``occ`` the mode occupations of every basis state (for observables).
    """

    H: sp.csr_matrix
    jump: np.ndarray
    occ: np.ndarray
    gamma: float
    J: float = 1.0
    U: float = 0.0
    N: int = 0
    geom: MeasurementGeometry | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.decay = self.gamma * np.abs(self.jump) ** 2
        self.H_eff = (self.H - 0.5j * sp.diags(self.decay)).tocsr()

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def R(self) -> int:
        return self.occ.shape[1]

    def norm_estimate(self) -> float:
        return float(abs(self.H_eff).sum(axis=1).max())

    def dense(self) -> np.ndarray:
        return self.H_eff.toarray()


def build_effective_operator(geom: MeasurementGeometry, J: float, U: float, gamma: float,
                             N: int) -> EffectiveOperator:
    """Reduced non-Hermitian Hamiltonian on the partition basis.

    Hopping moves one atom between modes with amplitude
    ``-t_ij sqrt(N_i (N_j + 1))``; the interaction is the mode-rescaled
    ``(U / 2 M_j) N_j (N_j - 1)``, which is exact only at ``U = 0``.
    """
    if N < 0 or int(N) != N:
        raise ValueError(f"N must be a non-negative integer, got {N!r}")
    if geom.coupling is None or geom.coupling.shape != (geom.R, geom.R):
        raise ValueError("geometry coupling graph does not match its mode count")
    R = geom.R
    basis = partitions(N, R)
    index = {tuple(p): k for k, p in enumerate(basis)}
    t = mode_hopping(geom, J)
    rows, cols, vals = [], [], []
    for k, p in enumerate(basis):
        for i in range(R):
            if p[i] == 0:
                continue
            for j in range(R):
                if i == j or t[i, j] == 0.0:
                    continue
                q = p.copy()
                q[i] -= 1
                q[j] += 1
                rows.append(index[tuple(q)])
                cols.append(k)
                vals.append(-t[i, j] * math.sqrt(p[i] * (p[j] + 1)))
    diag = np.zeros(len(basis))
    if U != 0.0:
        sizes = geom.sizes.astype(float)
        diag = 0.5 * (U / sizes * basis * (basis - 1)).sum(axis=1)
    H = sp.coo_matrix((vals, (rows, cols)), shape=(len(basis),) * 2).tocsr() + sp.diags(diag)
    jump = basis @ geom.beta
    return EffectiveOperator(H=H.tocsr().astype(complex), jump=jump, occ=basis, gamma=gamma,
                             J=J, U=U, N=N, geom=geom)


def initial_superfluid(geom: MeasurementGeometry, N: int, allow_unequal: bool = True) -> np.ndarray:
    """Amplitudes of the lattice superfluid on the partition basis.

    Multinomial weights ``sqrt(N! / prod N_i!) prod f_i^(N_i/2)`` with mode
    fractions ``f_i = M_i / M``; for equal modes ``f_i = 1/R``.
    """
    if not geom.equal_sizes and not allow_unequal:
        raise ValueError("modes have unequal sizes")
    basis = partitions(N, geom.R)
    f = geom.fractions
    logamp = 0.5 * (gammaln(N + 1) - gammaln(basis + 1).sum(axis=1) + (basis * np.log(f)).sum(axis=1))
    amp = np.exp(logamp)
    return (amp / np.linalg.norm(amp)).astype(complex)


def apply_jump(psi: np.ndarray, op: EffectiveOperator) -> np.ndarray:
    """Multiply by ``sum_j beta_j N_j`` and renormalise."""
    out = op.jump * psi
    nrm = np.linalg.norm(out)
    if nrm == 0.0 or nrm < 1e-300:
        raise ZeroProbabilityJump("state lies in the kernel of the jump operator")
    return out / nrm


# ---------------------------------------------------------------------------
# between-jump propagation
# ---------------------------------------------------------------------------

def taylor_terms(H_eff, psi: np.ndarray, h: float) -> np.ndarray:
    """Rows ``v_m = (-i H h)^m psi / m!`` so that ``psi(s h) = sum_m v_m s^m``."""
    scale2 = max(np.vdot(psi, psi).real, 1e-300)
    tol2 = TAYLOR_TOL ** 2 * scale2
    terms = [psi]
    v = psi
    for m in range(1, MAX_TAYLOR_TERMS):
        v = (-1j * h / m) * H_eff.dot(v)
        terms.append(v)
        if m > 2 and np.vdot(v, v).real < tol2:
            return np.array(terms)
    raise IntegrationError(
        f"Taylor series did not converge: h={h:g}, "
        f"last relative term {np.sqrt(np.vdot(v, v).real / scale2):.3e}")


def norm2_polynomial(terms: np.ndarray) -> np.ndarray:
    """Coefficients (ascending) of the squared norm of ``sum_m v_m s^m``."""
    G = (terms.conj() @ terms.T).real
    K = len(terms)
    order = np.add.outer(np.arange(K), np.arange(K))
    return np.bincount(order.ravel(), weights=G.ravel(), minlength=2 * K - 1)


def evaluate_terms(terms: np.ndarray, s: float) -> np.ndarray:
    return (s ** np.arange(len(terms))) @ terms


class Propagator:
    """Fixed-grid propagation of ``exp(-i H_eff t)`` with polynomial dense output."""

    def __init__(self, op: EffectiveOperator, sample_dt: float):
        self.op = op
        nrm = op.norm_estimate()
        nsub = max(1, math.ceil(sample_dt * nrm / STEP_THETA))
        self.h = sample_dt / nsub
        self.P = None
        self.A = op.H_eff
        if op.dim <= DENSE_PROPAGATOR_MAX_DIM:
            self.A = op.dense()
            self.P = scipy.linalg.expm(-1j * self.h * self.A)

    def step(self, psi: np.ndarray, h: float):
        """Advance by ``h``; returns ``(psi_new, terms or None)``."""
        if self.P is not None and h == self.h:
            return self.P @ psi, None
        terms = taylor_terms(self.A, psi, h)
        return evaluate_terms(terms, 1.0), terms

    def hit(self, psi: np.ndarray, h: float, target: float, terms=None):
        """Time in ``(0, h]`` at which ``|psi|^2`` falls to ``target``."""
        if terms is None:
            terms = taylor_terms(self.A, psi, h)
        coef = norm2_polynomial(terms)
        coef[0] -= target
        pw = np.arange(len(coef))
        f0, f1 = coef[0], coef.sum()
        if f1 > 1e-12:
            raise IntegrationError("no norm crossing inside the step")
        if f1 >= 0:
            s = 1.0
        elif f0 <= 0:
            s = 0.0
        else:
            s = brentq(lambda x: (x ** pw) @ coef, 0.0, 1.0, xtol=1e-15,
                       rtol=4 * np.finfo(float).eps)
        return s * h, evaluate_terms(terms, s)


def evolve_between_jumps(psi: np.ndarray, op: EffectiveOperator, target_norm2: float,
                         t_max: float = np.inf, dt: float | None = None):
    """Evolve a normalised state until ``|psi|^2 == target_norm2``.

    Returns ``(psi_unnormalised, elapsed)``; ``elapsed`` is ``inf`` when the
    norm does not reach the target before ``t_max`` (always so at
    ``gamma = 0``).
    """
    if not 0.0 < target_norm2 < 1.0:
        raise ValueError("target_norm2 must lie in (0, 1)")
    if not np.any(op.decay * np.abs(psi) ** 2 > 0) and op.gamma == 0.0:
        return psi.copy(), np.inf
    if dt is None:
        dt = STEP_THETA / max(op.norm_estimate(), 1e-12)
    prop = Propagator(op, dt)
    t = 0.0
    while t < t_max:
        h = min(prop.h, t_max - t)
        new, terms = prop.step(psi, h)
        if np.vdot(new, new).real <= target_norm2:
            s, at = prop.hit(psi, h, target_norm2, terms)
            return at, t + s
        psi, t = new, t + h
        if not np.isfinite(t):
            break
    return psi, np.inf


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryRecord:
    times: np.ndarray
    mode_means: np.ndarray
    jump_counts: np.ndarray
    jump_times: np.ndarray
    seed: int | None = None
    config_hash: str | None = None
    distributions: np.ndarray | None = None
    extras: dict = field(default_factory=dict)
    final_state: np.ndarray | None = None

    @property
    def n_jumps(self) -> int:
        return len(self.jump_times)

    def jsonl_lines(self, J: float = 1.0):
        """One JSON object per sample, time in units of ``1/J``."""
        for k, t in enumerate(self.times):
            row = {"t": float(t * J), "means": [float(x) for x in self.mode_means[k]],
                   "jumps": int(self.jump_counts[k])}
            for name, series in self.extras.items():
                row[name] = _jsonable(series[k])
            yield json.dumps(row, separators=(",", ":"))

    def summary(self, J: float = 1.0) -> dict:
        out = {"seed": self.seed, "config_hash": self.config_hash,
               "jump_times": [float(t * J) for t in self.jump_times],
               "n_jumps": self.n_jumps}
        if self.distributions is not None:
            out["final_distribution"] = self.distributions[-1].tolist()
        return out


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def marginals(psi: np.ndarray, occ: np.ndarray, N: int) -> np.ndarray:
    """``P(N_j = n)`` for every mode, shape ``(R, N + 1)``."""
    p = np.abs(psi) ** 2
    p = p / p.sum()
    return np.array([np.bincount(occ[:, j], weights=p, minlength=N + 1) for j in range(occ.shape[1])])


def run_trajectory(op: EffectiveOperator, psi0: np.ndarray, horizon: float, sample_dt: float,
                   rng: np.random.Generator | int | None = None, record_distribution: bool = False,
                   observers: dict | None = None, forced_jumps=None, seed=None,
                   config_hash: str | None = None) -> TrajectoryRecord:
    """Single quantum trajectory by the inverse-norm method.

    One uniform number is drawn per jump, so two models with identical
    dynamics make identical jump decisions from the same stream.
    ``observers`` maps names to ``f(psi_normalised) -> value`` recorded at
    every sample. ``forced_jumps`` replaces stochastic jumps by the given times.
    """
    if sample_dt <= 0:
        raise ValueError("sample_dt must be positive")
    if not isinstance(rng, np.random.Generator):
        seed = rng if seed is None else seed
        rng = np.random.default_rng(rng)
    observers = observers or {}
    nsamp = int(round(horizon / sample_dt)) + 1
    times = np.arange(nsamp) * sample_dt
    prop = Propagator(op, sample_dt)
    nsub = int(round(sample_dt / prop.h))

    means = np.empty((nsamp, op.R))
    counts = np.empty(nsamp, dtype=int)
    dists = np.empty((nsamp, op.R, op.N + 1)) if record_distribution else None
    extras = {name: [] for name in observers}
    jump_times: list[float] = []

    psi = psi0 / np.linalg.norm(psi0)
    stochastic = forced_jumps is None and op.gamma > 0
    forced = list(forced_jumps) if forced_jumps is not None else []
    r = rng.random() if stochastic else 0.0

    def record(k, state):
        n2 = np.vdot(state, state).real
        w = np.abs(state) ** 2 / n2
        means[k] = w @ op.occ
        counts[k] = len(jump_times)
        if dists is not None:
            dists[k] = marginals(state, op.occ, op.N)
        for name, f in observers.items():
            extras[name].append(f(state / math.sqrt(n2)))

    record(0, psi)
    t = 0.0
    # grid position counted in substeps to avoid drift in t
    for k in range(1, nsamp):
        for sub in range(nsub):
            t_end = ((k - 1) * nsub + sub + 1) * prop.h
            while True:
                h = t_end - t
                if h <= 1e-15 * max(1.0, t_end):
                    t = t_end
                    break
                if forced:
                    if forced[0] <= t_end:
                        s = max(forced.pop(0) - t, 0.0)
                        if s > 0:
                            psi, _ = prop.step(psi, s)
                        t += s
                        jump_times.append(t)
                        psi = apply_jump(psi / np.linalg.norm(psi), op)
                        continue
                new, terms = prop.step(psi, h)
                if stochastic and np.vdot(new, new).real <= r:
                    s, at = prop.hit(psi, h, r, terms)
                    t += s
                    jump_times.append(t)
                    psi = apply_jump(at, op)
                    r = rng.random()
                    continue
                psi, t = new, t_end
                break
        record(k, psi)
    # renormalisation of the running state happens only at jumps; rescale the
    # saved state for the caller
    final = psi / np.linalg.norm(psi)
    return TrajectoryRecord(times=times, mode_means=means, jump_counts=counts,
                            jump_times=np.array(jump_times), seed=seed, config_hash=config_hash,
                            distributions=dists,
                            extras={n: np.array(v) for n, v in extras.items()},
                            final_state=final)


# ---------------------------------------------------------------------------
# full-lattice oracle
# ---------------------------------------------------------------------------

MAX_FOCK_DIM = 200_000


def fock_basis(N: int, M: int) -> np.ndarray:
    """Occupation vectors of ``N`` bosons on ``M`` sites (stars and bars)."""
    dim = math.comb(N + M - 1, N)
    if dim > MAX_FOCK_DIM:
        raise ValueError(f"Fock dimension {dim} exceeds the oracle cap {MAX_FOCK_DIM}")
    out = np.zeros((dim, M), dtype=int)
    for k, bars in enumerate(combinations(range(N + M - 1), M - 1)):
        prev = -1
        for s, b in enumerate(bars):
            out[k, s] = b - prev - 1
            prev = b
        out[k, M - 1] = N + M - 2 - prev
    return out


def oracle_model(geom: MeasurementGeometry, lattice: LatticeSpec, J: float, U: float, gamma: float,
                 N: int):
    """Bose-Hubbard chain with jump operator ``sqrt(gamma) sum_j J_jj n_j``.

    Per-bond hopping ``J/2`` (see :func:`mode_hopping`) and on-site
    interaction ``(U/2) n (n - 1)``. Returns ``(op, basis)``; ``op.occ`` holds
    mode occupations so observables line up with the reduced model.
    """
    basis = fock_basis(N, lattice.M)
    index = {tuple(b): k for k, b in enumerate(basis)}
    bonds = sorted({tuple(sorted((s, k))) for s in range(lattice.M) for k in lattice.neighbours(s)})
    rows, cols, vals = [], [], []
    for k, b in enumerate(basis):
        for (s1, s2) in bonds:
            for src, dst in ((s1, s2), (s2, s1)):
                if b[src] == 0:
                    continue
                q = b.copy()
                q[src] -= 1
                q[dst] += 1
                rows.append(index[tuple(q)])
                cols.append(k)
                vals.append(-0.5 * J * math.sqrt(b[src] * (b[dst] + 1)))
    diag = 0.5 * U * (basis * (basis - 1)).sum(axis=1)
    H = sp.coo_matrix((vals, (rows, cols)), shape=(len(basis),) * 2).tocsr() + sp.diags(diag)
    occ = np.stack([basis[:, geom.mode_of_site == i].sum(axis=1) for i in range(geom.R)], axis=1)
    jump = basis @ geom.jjj
    op = EffectiveOperator(H=H.tocsr().astype(complex), jump=jump, occ=occ, gamma=gamma, J=J, U=U,
                           N=N, geom=geom, meta={"oracle": True})
    return op, basis


def subspace_embedding(geom: MeasurementGeometry, basis: np.ndarray, N: int) -> np.ndarray:
    """Columns are the products of per-mode superfluids in the Fock basis.

    Column ``k`` matches partition ``k`` of :func:`partitions`; the columns are
    orthonormal.
    """
    parts = partitions(N, geom.R)
    index = {tuple(p): k for k, p in enumerate(parts)}
    occ = np.stack([basis[:, geom.mode_of_site == i].sum(axis=1) for i in range(geom.R)], axis=1)
    sizes = geom.sizes
    V = np.zeros((len(basis), len(parts)))
    log_fact_sites = gammaln(basis + 1).sum(axis=1)
    logv = 0.5 * (gammaln(occ + 1).sum(axis=1) - (occ * np.log(sizes)).sum(axis=1) - log_fact_sites)
    cols = np.array([index[tuple(o)] for o in occ])
    V[np.arange(len(basis)), cols] = np.exp(logv)
    return V


def lattice_superfluid(basis: np.ndarray) -> np.ndarray:
    """``(sum_i b_i^dag)^N |0> / sqrt(M^N N!)`` directly in the Fock basis."""
    N = int(basis[0].sum())
    M = basis.shape[1]
    logv = 0.5 * (gammaln(N + 1) - N * np.log(M) - gammaln(basis + 1).sum(axis=1))
    return np.exp(logv).astype(complex)


def leakage_observer(V: np.ndarray):
    """``|(1 - P_S) psi|`` for normalised ``psi``."""
    def f(psi):
        return float(np.linalg.norm(psi - V @ (V.T @ psi)))
    return f


def oracle_full_lattice(geom: MeasurementGeometry, lattice: LatticeSpec, J: float, U: float,
                        gamma: float, N: int, horizon: float, sample_dt: float, rng=None,
                        record_leakage: bool = True, **kw) -> TrajectoryRecord:
    """Full-Fock-space trajectory from the lattice superfluid, same RNG protocol."""
    op, basis = oracle_model(geom, lattice, J, U, gamma, N)
    psi0 = lattice_superfluid(basis)
    observers = {}
    if record_leakage:
        observers["leakage"] = leakage_observer(subspace_embedding(geom, basis, N))
    return run_trajectory(op, psi0, horizon, sample_dt, rng=rng, observers=observers, **kw)


def config_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
