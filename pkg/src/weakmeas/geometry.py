"""Measurement geometry: scattering coefficients, spatial modes, mode graph.

Sites are indexed from 0. A global phase on every coefficient leaves the
photon number and hence all conditional dynamics unchanged.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class LatticeSpec:
    M: int
    boundary: str = "periodic"

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"M must be an integer >= 2, got {self.M!r}")
        if self.boundary not in ("open", "periodic"):
            raise ValueError(f"boundary must be 'open' or 'periodic', got {self.boundary!r}")
        if self.boundary == "periodic" and self.M < 3:
            raise ValueError("a periodic chain needs M >= 3")

    def neighbours(self, j: int) -> list[int]:
        out = []
        for k in (j - 1, j + 1):
            if 0 <= k < self.M:
                out.append(k)
            elif self.boundary == "periodic":
                out.append(k % self.M)
        return out


@dataclass(frozen=True)
class ProbeSpec:
    """Light-mode geometry along the chain.

    ``traveling``: coefficient ``exp(i*delta*j)``; ``delta`` is the projection of
    the wave-vector difference on the lattice axis times the lattice constant.
    ``standing``: coefficient ``cos(delta*j + offset0) * cos(delta*j + offset1)``
    (probe and cavity share the projection ``delta``).
    """

    kind: str = "traveling"
    delta: float = np.pi
    offset0: float = 0.0
    offset1: float = 0.0

    def __post_init__(self):
        if self.kind not in ("traveling", "standing"):
            raise ValueError(f"unknown probe kind {self.kind!r}")
        if not 0.0 <= self.delta < 2 * np.pi:
            raise ValueError(f"delta must lie in [0, 2pi), got {self.delta}")


@dataclass
class MeasurementGeometry:
    jjj: np.ndarray
    mode_of_site: np.ndarray
    R: int
    beta: np.ndarray
    coupling: np.ndarray | None = None
    local: bool = False
    sizes: np.ndarray = field(init=False)

    def __post_init__(self):
        self.jjj = np.asarray(self.jjj, dtype=complex)
        self.mode_of_site = np.asarray(self.mode_of_site, dtype=int)
        self.beta = np.asarray(self.beta, dtype=complex)
        self.sizes = np.bincount(self.mode_of_site, minlength=self.R)

    @property
    def M(self) -> int:
        return len(self.jjj)

    @property
    def fractions(self) -> np.ndarray:
        return self.sizes / self.M

    @property
    def equal_sizes(self) -> bool:
        return bool(np.all(self.sizes == self.sizes[0]))

    def to_dict(self) -> dict:
        """JSON-friendly geometry report."""
        return {
            "M": self.M,
            "R": self.R,
            "jjj": [[float(z.real), float(z.imag)] for z in self.jjj],
            "mode_of_site": self.mode_of_site.tolist(),
            "beta": [[float(z.real), float(z.imag)] for z in self.beta],
            "sizes": self.sizes.tolist(),
            "coupling": None if self.coupling is None else self.coupling.tolist(),
            "local": self.local,
        }


def compute_jjj(lattice: LatticeSpec, probe: ProbeSpec) -> np.ndarray:
    j = np.arange(lattice.M)
    if probe.kind == "traveling":
        return np.exp(1j * probe.delta * j)
    vals = np.cos(probe.delta * j + probe.offset0) * np.cos(probe.delta * j + probe.offset1)
    # cos(pi/2) leaves ~1e-17 residues; snap them so grouping stays exact
    vals = np.where(np.abs(vals) < 1e-14, 0.0, vals)
    return vals.astype(complex)


def partition_modes(jjj, tol: float = DEFAULT_TOL, boundary: str = "periodic") -> MeasurementGeometry:
    """Group sites with equal coefficient (within ``tol``) into spatial modes.

    Modes are numbered by first appearance along the chain, so site 0 always
    belongs to mode 0.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    jjj = np.asarray(jjj, dtype=complex)
    beta: list[complex] = []
    mode_of_site = np.empty(len(jjj), dtype=int)
    for s, val in enumerate(jjj):
        for k, b in enumerate(beta):
            if abs(val - b) <= tol:
                mode_of_site[s] = k
                break
        else:
            beta.append(complex(val))
            mode_of_site[s] = len(beta) - 1
    R = len(beta)
    local = R == len(jjj)
    if local:
        warnings.warn("every site scatters differently: the measurement is effectively local",
                      stacklevel=2)
    geom = MeasurementGeometry(jjj=jjj, mode_of_site=mode_of_site, R=R, beta=np.array(beta), local=local)
    geom.coupling = mode_coupling_graph(geom, LatticeSpec(len(jjj), boundary))
    return geom


def mode_coupling_graph(geom: MeasurementGeometry, lattice: LatticeSpec) -> np.ndarray:
    """Nearest-neighbour multiplicities between modes.

    Entry ``(i, j)`` counts the neighbours in mode ``j`` of the first site of
    mode ``i``. Row sums equal the coordination number of that site. The
    matrix is symmetric when all modes have the same size.
    """
    if lattice.M != geom.M:
        raise ValueError(f"lattice has {lattice.M} sites, geometry has {geom.M}")
    C = np.zeros((geom.R, geom.R), dtype=int)
    for i in range(geom.R):
        rep = int(np.flatnonzero(geom.mode_of_site == i)[0])
        for k in lattice.neighbours(rep):
            C[i, geom.mode_of_site[k]] += 1
    return C


def coupling_is_uniform(geom: MeasurementGeometry, lattice: LatticeSpec) -> bool:
    """True when every site of a mode sees the same neighbour multiplicities.

    This is the condition for tunneling to keep products of per-mode
    superfluids inside the reduced subspace.
    """
    for i in range(geom.R):
        counts = set()
        for s in np.flatnonzero(geom.mode_of_site == i):
            row = np.zeros(geom.R, dtype=int)
            for k in lattice.neighbours(int(s)):
                row[geom.mode_of_site[k]] += 1
            counts.add(tuple(row))
        if len(counts) > 1:
            return False
    return True


def build_geometry(lattice: LatticeSpec, probe: ProbeSpec | None = None, jjj=None,
                   tol: float = DEFAULT_TOL) -> MeasurementGeometry:
    """Convenience: coefficients from a probe (or explicit list) -> geometry."""
    if (probe is None) == (jjj is None):
        raise ValueError("give exactly one of probe or jjj")
    if jjj is None:
        jjj = compute_jjj(lattice, probe)
    elif len(jjj) != lattice.M:
        raise ValueError(f"expected {lattice.M} coefficients, got {len(jjj)}")
    return partition_modes(jjj, tol=tol, boundary=lattice.boundary)


# named geometries used throughout the figures
def odd_sites(M: int) -> MeasurementGeometry:
    """[1, 0, 1, 0, ...]: only one sublattice scatters."""
    return build_geometry(LatticeSpec(M), ProbeSpec("standing", np.pi / 2))


def diffraction_minimum(M: int) -> MeasurementGeometry:
    """(-1)^j: photons collected in the diffraction minimum."""
    return build_geometry(LatticeSpec(M), ProbeSpec("traveling", np.pi))


def rgb(M: int) -> MeasurementGeometry:
    """exp(2 pi i j / 3): three modes alternating RGBRGB."""
    return build_geometry(LatticeSpec(M), ProbeSpec("traveling", 2 * np.pi / 3))


def rgbg(M: int) -> MeasurementGeometry:
    """[0, 1/2, 1, 1/2, 0, ...]: three modes alternating RGBG."""
    return build_geometry(LatticeSpec(M), ProbeSpec("standing", np.pi / 4, np.pi / 2, np.pi / 2))
