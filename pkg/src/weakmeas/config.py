"""Run configuration: strict TOML schema with field-path error reporting.

Layout::

    [run]       engine, horizon, sample_dt, n_trajectories, master_seed, output, ...
    [physics]   N, M, J, U, gamma, eta
    [geometry]  named | (kind, delta, offset0, offset1) | jjj ; boundary, tol
    [gaussian]  Gamma, h, Lambda, b2_0, z0_0, jumps, flow_gamma, flow, p_max
    [sme]       etas, p_max, max_dt, check_every
    [moments]   dt, p_max, block_size

Times are in units of ``1/J``. Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import geometry as geo
from .trajectory import MAX_FOCK_DIM, partition_dim

ENGINES = ("exact", "oracle", "gaussian", "sme", "moments-jump", "moments-diffusion")
NAMED_GEOMETRIES = {
    "odd_sites": geo.odd_sites,
    "diffraction_minimum": geo.diffraction_minimum,
    "rgb": geo.rgb,
    "rgbg": geo.rgbg,
}
CAP_EXACT_R2 = 10_000
CAP_EXACT_R3 = 300
CAP_SME = 150


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))


@dataclass
class RunSection:
    engine: str = "exact"
    horizon: float = 10.0
    sample_dt: float = 0.1
    n_trajectories: int = 1
    master_seed: int = 0
    output: str = "out"
    record_distribution: bool = False
    workers: int = 1
    label: str = ""


@dataclass
class PhysicsSection:
    N: int = 10
    M: int = 20
    J: float = 1.0
    U: float = 0.0
    gamma: float = 0.0
    eta: float = 1.0


@dataclass
class GeometrySection:
    named: str = ""
    kind: str = ""
    delta: float = math.pi
    offset0: float = 0.0
    offset1: float = 0.0
    jjj: list = field(default_factory=list)
    boundary: str = "periodic"
    tol: float = geo.DEFAULT_TOL


@dataclass
class GaussianSection:
    Gamma: float | None = None
    h: float | None = None
    Lambda: float | None = None
    b2_0: float | None = None
    z0_0: float = 0.0
    jumps: str = "stochastic"      # stochastic | none | exact
    flow_gamma: float | None = None
    flow: str = "full"             # full | none
    p_max: float = 0.01


@dataclass
class SMESection:
    etas: list = field(default_factory=list)
    p_max: float = 0.01
    max_dt: float = 0.01
    check_every: int = 0


@dataclass
class MomentsSection:
    dt: float | None = None
    p_max: float = 0.01
    block_size: int = 64


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    gaussian: GaussianSection = field(default_factory=GaussianSection)
    sme: SMESection = field(default_factory=SMESection)
    moments: MomentsSection = field(default_factory=MomentsSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def build_geometry(self) -> geo.MeasurementGeometry:
        g, M = self.geometry, self.physics.M
        if g.named:
            return NAMED_GEOMETRIES[g.named](M)
        lattice = geo.LatticeSpec(M, g.boundary)
        if g.jjj:
            return geo.build_geometry(lattice, jjj=[_to_complex(v) for v in g.jjj], tol=g.tol)
        probe = geo.ProbeSpec(g.kind or "traveling", g.delta, g.offset0, g.offset1)
        return geo.build_geometry(lattice, probe, tol=g.tol)

    def lattice(self) -> geo.LatticeSpec:
        return geo.LatticeSpec(self.physics.M, self.geometry.boundary)


SECTIONS = {"run": RunSection, "physics": PhysicsSection, "geometry": GeometrySection,
            "gaussian": GaussianSection, "sme": SMESection, "moments": MomentsSection}


def _to_complex(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(v[0], v[1])
    return complex(v)


def _coerce(path: str, value, default, annotation: str, errors: list[str]):
    ann = annotation.replace(" ", "")
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
        return value
    if ann.startswith("float"):
        if value is None and "None" in ann:
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return value
        return float(value)
    if ann == "bool":
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true/false, got {value!r}")
        return value
    if ann == "str":
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
        return value
    if ann == "list":
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list, got {value!r}")
        return value
    return value


def from_dict(data: dict) -> RunConfig:
    """Build and validate a config; raises :class:`ConfigError` listing every violation."""
    errors: list[str] = []
    cfg = RunConfig()
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a table"])
    for key in data:
        if key not in SECTIONS:
            errors.append(f"{key}: unknown section")
    for name, cls in SECTIONS.items():
        table = data.get(name, {})
        if not isinstance(table, dict):
            errors.append(f"{name}: expected a table")
            continue
        section = getattr(cfg, name)
        fields = cls.__dataclass_fields__
        for key, value in table.items():
            if key not in fields:
                errors.append(f"{name}.{key}: unknown key")
                continue
            f = fields[key]
            ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
            setattr(section, key, _coerce(f"{name}.{key}", value, getattr(section, key), ann, errors))
    if not errors:
        errors.extend(validate(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate(cfg: RunConfig) -> list[str]:
    e: list[str] = []
    r, p, g = cfg.run, cfg.physics, cfg.geometry
    if r.engine not in ENGINES:
        e.append(f"run.engine: must be one of {', '.join(ENGINES)}")
    if not r.horizon > 0:
        e.append("run.horizon: must be positive")
    if not r.sample_dt > 0:
        e.append("run.sample_dt: must be positive")
    elif r.horizon > 0 and abs(r.horizon / r.sample_dt - round(r.horizon / r.sample_dt)) > 1e-9:
        e.append("run.sample_dt: must divide run.horizon")
    if r.n_trajectories < 1:
        e.append("run.n_trajectories: must be >= 1")
    if r.master_seed < 0:
        e.append("run.master_seed: must be non-negative")
    if r.workers < 1:
        e.append("run.workers: must be >= 1")
    if p.N < 1:
        e.append("physics.N: must be >= 1")
    if p.M < 2:
        e.append("physics.M: must be >= 2")
    if p.J < 0:
        e.append("physics.J: must be non-negative")
    if p.gamma < 0:
        e.append("physics.gamma: must be non-negative")
    if not 0 <= p.eta <= 1:
        e.append("physics.eta: must lie in [0, 1]")
    if p.J == 0 and r.engine != "gaussian":
        e.append("physics.J: time is measured in units of 1/J, so J must be positive")
    chosen = sum(bool(x) for x in (g.named, g.kind, g.jjj))
    if chosen > 1:
        e.append("geometry: give only one of named, kind or jjj")
    if g.named and g.named not in NAMED_GEOMETRIES:
        e.append(f"geometry.named: must be one of {', '.join(NAMED_GEOMETRIES)}")
    if g.kind and g.kind not in ("traveling", "standing"):
        e.append("geometry.kind: must be 'traveling' or 'standing'")
    if not 0 <= g.delta < 2 * math.pi:
        e.append("geometry.delta: must lie in [0, 2pi)")
    if g.boundary not in ("open", "periodic"):
        e.append("geometry.boundary: must be 'open' or 'periodic'")
    if g.jjj and len(g.jjj) != p.M:
        e.append(f"geometry.jjj: expected {p.M} coefficients, got {len(g.jjj)}")
    if not g.tol > 0:
        e.append("geometry.tol: must be positive")
    if e:
        return e

    gs = cfg.gaussian
    if gs.jumps not in ("stochastic", "none", "exact"):
        e.append("gaussian.jumps: must be 'stochastic', 'none' or 'exact'")
    if gs.flow not in ("full", "none"):
        e.append("gaussian.flow: must be 'full' or 'none'")
    if gs.h is not None and not 0 < gs.h < 1:
        e.append("gaussian.h: must lie in (0, 1)")
    if gs.b2_0 is not None and not gs.b2_0 > 0:
        e.append("gaussian.b2_0: must be positive")
    if not 0 < gs.p_max < 0.1:
        e.append("gaussian.p_max: must lie in (0, 0.1)")
    if not 0 < cfg.sme.p_max < 0.1:
        e.append("sme.p_max: must lie in (0, 0.1)")
    if any((not isinstance(x, (int, float))) or not 0 <= x <= 1 for x in cfg.sme.etas):
        e.append("sme.etas: every efficiency must lie in [0, 1]")
    if cfg.moments.block_size < 1:
        e.append("moments.block_size: must be >= 1")

    # engine caps need the mode count
    if r.engine in ("exact", "oracle", "sme") or (r.engine == "gaussian" and gs.jumps == "exact"):
        try:
            import warnings
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                geom = cfg.build_geometry()
        except ValueError as exc:
            return e + [f"geometry: {exc}"]
        if r.engine in ("exact", "gaussian"):
            cap = CAP_EXACT_R2 if geom.R <= 2 else CAP_EXACT_R3
            if geom.R > 3:
                e.append(f"geometry: the reduced engine supports R <= 3, got R = {geom.R}")
            elif p.N > cap:
                e.append(f"physics.N: exceeds the cap {cap} of the exact engine for R = {geom.R}")
        if r.engine == "oracle" and math.comb(p.N + p.M - 1, p.N) > MAX_FOCK_DIM:
            e.append(f"physics.N: Fock dimension exceeds {MAX_FOCK_DIM}")
        if r.engine == "sme":
            if geom.R != 2:
                e.append("geometry: the SME engine is two-mode only")
            if p.N > CAP_SME:
                e.append(f"physics.N: exceeds the SME cap {CAP_SME}")
        if r.engine == "gaussian" and geom.R != 2:
            e.append("geometry: exact-jump forcing needs a two-mode geometry")
    if r.engine == "exact" and not e:
        _ = partition_dim(p.N, 3)
    return e


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError([f"{path}: file not found"]) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"{path}: {exc}"]) from None
    return from_dict(data)


def load_raw(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def with_override(data: dict, dotted: str, value) -> dict:
    """Copy of ``data`` with ``section.key`` (or a bare physics key) replaced."""
    out = copy.deepcopy(data)
    if "." in dotted:
        section, key = dotted.split(".", 1)
    else:
        section = next((s for s, cls in SECTIONS.items() if dotted in cls.__dataclass_fields__), None)
        if section is None:
            raise ConfigError([f"{dotted}: unknown parameter"])
        key = dotted
    out.setdefault(section, {})[key] = value
    return out


def to_toml(data: dict) -> str:
    """Minimal TOML writer for flat two-level config tables."""
    lines = []
    for section, table in data.items():
        lines.append(f"[{section}]")
        for key, value in table.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)
