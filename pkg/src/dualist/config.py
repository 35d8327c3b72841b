"""YAML configuration: parsing, exhaustive validation and round-trip dumping."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import yaml
from scipy import constants

from . import quantum
from .dynamics import IntegratorConfig
from .errors import ConfigError, ModelError
from .macro import GaussianPacketSpec
from .ste import RateModel

UNITS = ("natural", "physical")


@dataclass
class EnsembleSettings:
    members: int = 1000
    horizon: float = 1.0
    init: str = "pure"
    theta0: list | None = None
    stride: int = 100
    block_size: int = 256
    t0: float = 0.0
    record_trajectories: bool = True
    record_phases: bool = True

    def __post_init__(self):
        if self.members < 0:
            raise ValueError("members must be >= 0")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.init not in ("pure", "dqe", "uniform"):
            raise ValueError("init must be pure, dqe or uniform")
        if self.stride < 1 or self.block_size < 1:
            raise ValueError("stride and block_size must be >= 1")


@dataclass
class OracleSettings:
    cells: int = 512
    scheme: str = "cn"
    initial: str = "uniform"
    compare: bool = True
    samples: int = 10

    def __post_init__(self):
        if self.scheme not in ("cn", "implicit"):
            raise ValueError("scheme must be cn or implicit")
        if self.initial not in ("uniform", "psi"):
            raise ValueError("initial must be uniform or psi")
        if self.cells < 8 or self.samples < 1:
            raise ValueError("cells must be >= 8 and samples >= 1")


@dataclass
class SteTestSettings:
    points: int = 5
    draws: int = 100000
    bins: int = 64
    max_failures: int = 1

    def __post_init__(self):
        if self.points < 1 or self.draws < 100 or self.bins < 2 or self.max_failures < 0:
            raise ValueError("invalid ste_test settings")


@dataclass
class DqeSettings:
    members: int = 10000
    phase_bins: int = 4
    init: str = "dqe"

    def __post_init__(self):
        if self.members < 1000 or self.phase_bins < 1:
            raise ValueError("dqe needs members >= 1000 and phase_bins >= 1")
        if self.init not in ("dqe", "pure"):
            raise ValueError("init must be dqe or pure")


@dataclass
class GrwSettings:
    alpha: float = 100.0
    lam: float = 1.0
    x_min: float = -5.0
    x_max: float = 5.0
    n: int = 2048
    center: float = 0.0
    width: float = 1.0
    horizon: float = 10.0
    draws: int = 100000

    def __post_init__(self):
        if not self.alpha > 0 or self.lam < 0 or not self.width > 0:
            raise ValueError("alpha and width must be positive, lam >= 0")
        if not self.x_max > self.x_min or self.n < 16:
            raise ValueError("invalid grid")


@dataclass
class MacroSettings:
    N: list = field(default_factory=lambda: [1, 10, 100, 1000])
    m: float = 1.0
    L1: float = 1.0
    chi: float = 0.5
    n_lambda_tau: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    sigma_mu: list = field(default_factory=lambda: [0.0, 1.0, 3.0])
    r_over_sigma: list = field(default_factory=lambda: [0.0, 1.0, -1.0, 3.0, -3.0])
    mc_samples: int = 10000

    def __post_init__(self):
        if any(n < 1 for n in self.N) or not self.m > 0 or not self.L1 > 0:
            raise ValueError("N >= 1, m > 0 and L1 > 0 required")


@dataclass
class Overrides:
    eps_node: float | None = None
    b_max: float | None = None
    grid_points: int | None = None
    significance: float = 0.01

    def __post_init__(self):
        if not 0 < self.significance < 1:
            raise ValueError("significance must lie in (0, 1)")


@dataclass
class SimConfig:
    seed: int
    model: quantum.ModelSpec
    units: str = "natural"
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    rate: RateModel = field(default_factory=RateModel)
    ensemble: EnsembleSettings = field(default_factory=EnsembleSettings)
    oracle: OracleSettings = field(default_factory=OracleSettings)
    ste_test: SteTestSettings = field(default_factory=SteTestSettings)
    dqe: DqeSettings = field(default_factory=DqeSettings)
    grw: GrwSettings = field(default_factory=GrwSettings)
    macro: MacroSettings = field(default_factory=MacroSettings)
    output: str = "out"
    overrides: Overrides = field(default_factory=Overrides)

    def effective_integrator(self) -> IntegratorConfig:
        cfg = asdict(self.integrator)
        if self.overrides.b_max is not None:
            cfg["b_max"] = self.overrides.b_max
        if self.overrides.eps_node is not None:
            cfg["eps_node"] = self.overrides.eps_node
        return IntegratorConfig(**cfg)

    def build_system(self):
        spec = self.model
        if self.overrides.grid_points is not None:
            spec = quantum.ModelSpec(**{**{f.name: getattr(spec, f.name) for f in fields(spec)},
                                        "grid_points": self.overrides.grid_points})
        return quantum.build_model(spec)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_SECTIONS = {
    "integrator": IntegratorConfig, "rate": RateModel, "ensemble": EnsembleSettings,
    "oracle": OracleSettings, "ste_test": SteTestSettings, "dqe": DqeSettings,
    "grw": GrwSettings, "macro": MacroSettings, "overrides": Overrides,
}
_TOP = {"seed", "units", "model", "output", *_SECTIONS}
_MODEL_KEYS = {"kind", "levels", "mass", "hbar", "length", "omega", "packet", "grid_points"}
_LEVEL_KEYS = {"level", "coefficients"}
_PACKET_KEYS = {f.name for f in fields(GaussianPacketSpec)}

_BOOL_FIELDS = {"record_trajectories", "record_phases", "compare"}
_INT_FIELDS = {"members", "stride", "block_size", "cells", "samples", "points", "draws", "bins",
               "max_failures", "phase_bins", "n", "mc_samples", "n_particles", "grid_points", "n_levels"}
_STR_FIELDS = {"mode", "boundary", "init", "scheme", "initial"}
_LIST_FIELDS = {"theta0", "N", "n_lambda_tau", "sigma_mu", "r_over_sigma"}


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_value(name, value, path, errors):
    if value is None:
        return
    if name in _BOOL_FIELDS:
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true/false, got {value!r}")
    elif name in _INT_FIELDS:
        if not (isinstance(value, int) and not isinstance(value, bool)):
            errors.append(f"{path}: expected an integer, got {value!r}")
    elif name in _STR_FIELDS:
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
    elif name in _LIST_FIELDS:
        if not (isinstance(value, list) and all(_is_number(v) for v in value)):
            errors.append(f"{path}: expected a list of numbers, got {value!r}")
    elif not _is_number(value):
        errors.append(f"{path}: expected a number, got {value!r}")
    elif not math.isfinite(value):
        errors.append(f"{path}: must be finite")


def _section(cls, data, path, errors):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errors.append(f"{path}: expected a mapping")
        return None
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            errors.append(f"{path}.{key}: unknown key")
    before = len(errors)
    for key, value in data.items():
        if key in known:
            _check_value(key, value, f"{path}.{key}", errors)
    if len(errors) > before:
        return None
    # the known keys are still checked semantically so every problem is listed
    kwargs = {k: (float(v) if _is_number(v) and k not in _INT_FIELDS and k not in _LIST_FIELDS else v)
              for k, v in data.items() if k in known}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as err:
        errors.append(f"{path}: {err}")
        return None


def _coefficient(v, path, errors):
    if isinstance(v, list) and len(v) == 2 and all(_is_number(x) for x in v):
        return complex(v[0], v[1])
    if _is_number(v):
        return complex(v)
    if isinstance(v, str):
        try:
            return complex(v.replace(" ", ""))
        except ValueError:
            pass
    errors.append(f"{path}: cannot read {v!r} as a complex coefficient")
    return None


def _model(data, units, errors):
    path = "model"
    if not isinstance(data, dict):
        errors.append(f"{path}: required mapping is missing")
        return None
    for key in data:
        if key not in _MODEL_KEYS:
            errors.append(f"{path}.{key}: unknown key")
    kind = data.get("kind")
    if kind is None:
        errors.append(f"{path}.kind: required")
    elif kind not in quantum.MODEL_KINDS:
        errors.append(f"{path}.kind: must be one of {quantum.MODEL_KINDS}")
    kwargs = {"kind": kind}
    for key in ("mass", "length"):
        if key in data:
            v = data[key]
            if _is_number(v):
                if v <= 0:
                    errors.append(f"{path}.{key}: must be positive")
                kwargs[key] = float(v)
            elif isinstance(v, list) and all(_is_number(x) for x in v):
                if any(x <= 0 for x in v):
                    errors.append(f"{path}.{key}: must be positive")
                kwargs[key] = tuple(float(x) for x in v)
            else:
                errors.append(f"{path}.{key}: expected a number or list of numbers")
    for key in ("hbar", "omega"):
        if key in data:
            v = data[key]
            if not _is_number(v) or v <= 0:
                errors.append(f"{path}.{key}: must be a positive number")
            else:
                kwargs[key] = float(v)
    if "hbar" not in kwargs and units == "physical":
        kwargs["hbar"] = constants.hbar
    if "grid_points" in data:
        v = data["grid_points"]
        if not isinstance(v, int) or isinstance(v, bool) or v < 16:
            errors.append(f"{path}.grid_points: expected an integer >= 16")
        else:
            kwargs["grid_points"] = v
    levels = []
    raw = data.get("levels", [])
    if not isinstance(raw, list):
        errors.append(f"{path}.levels: expected a list")
        raw = []
    for i, lv in enumerate(raw):
        lp = f"{path}.levels[{i}]"
        if not isinstance(lv, dict):
            errors.append(f"{lp}: expected a mapping")
            continue
        for key in lv:
            if key not in _LEVEL_KEYS:
                errors.append(f"{lp}.{key}: unknown key")
        n = lv.get("level")
        if not isinstance(n, int) or isinstance(n, bool):
            errors.append(f"{lp}.level: expected an integer")
            continue
        coeffs = lv.get("coefficients", [1.0])
        if not isinstance(coeffs, list) or not coeffs:
            errors.append(f"{lp}.coefficients: expected a non-empty list")
            continue
        cs = [_coefficient(c, f"{lp}.coefficients[{j}]", errors) for j, c in enumerate(coeffs)]
        if any(c is None for c in cs):
            continue
        levels.append(quantum.LevelSelection(n, tuple(cs)))
    if kind == "free_packet":
        pk = data.get("packet")
        if not isinstance(pk, dict):
            errors.append(f"{path}.packet: required mapping for free_packet")
        else:
            bad = [k for k in pk if k not in _PACKET_KEYS]
            for k in bad:
                errors.append(f"{path}.packet.{k}: unknown key")
            for k, v in pk.items():
                if k in _PACKET_KEYS:
                    _check_value(k, v, f"{path}.packet.{k}", errors)
            if not bad:
                try:
                    kwargs["packet"] = GaussianPacketSpec(**pk)
                except (ValueError, TypeError) as err:
                    errors.append(f"{path}.packet: {err}")
    elif kind is not None:
        if not levels and not any(e.startswith(f"{path}.levels") for e in errors):
            errors.append(f"{path}.levels: at least one level must be selected")
    kwargs["levels"] = levels
    try:
        return quantum.ModelSpec(**kwargs)
    except (ValueError, TypeError) as err:
        errors.append(f"{path}: {err}")
        return None


def parse_config(text: str) -> SimConfig:
    """Parse and validate a YAML document; raise :class:`ConfigError` listing every problem."""
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as err:
        mark = err.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError([f"parse error at {where}: {err.problem}"]) from None
    except yaml.YAMLError as err:
        raise ConfigError([f"parse error: {err}"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["document must be a mapping"])
    errors = []
    for key in data:
        if key not in _TOP:
            errors.append(f"{key}: unknown key")
    seed = data.get("seed")
    if seed is None:
        errors.append("seed: required (no entropy default)")
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed >= 2**64:
        errors.append("seed: expected an unsigned 64-bit integer")
    units = data.get("units", "natural")
    if units not in UNITS:
        errors.append(f"units: must be one of {UNITS}")
    output = data.get("output", "out")
    if not isinstance(output, str):
        errors.append("output: expected a directory path string")
    model = _model(data.get("model"), units, errors)
    sections = {name: _section(cls, data.get(name), name, errors) for name, cls in _SECTIONS.items()}
    if model is not None and not errors:
        try:
            quantum.build_model(model)
        except ModelError as err:
            errors.append(f"model: {err}")
    if errors:
        raise ConfigError(errors)
    return SimConfig(seed=seed, model=model, units=units, output=output, **sections)


def load_config(path) -> SimConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def config_to_dict(cfg: SimConfig) -> dict:
    """Plain-data form whose YAML dump parses back to an equal config."""
    spec = cfg.model
    model = {"kind": spec.kind, "mass": _plain(spec.mass), "hbar": spec.hbar, "length": _plain(spec.length),
             "omega": spec.omega, "grid_points": spec.grid_points,
             "levels": [{"level": lv.level, "coefficients": [[c.real, c.imag] for c in lv.coefficients]}
                        for lv in spec.levels]}
    if spec.packet is not None:
        model["packet"] = asdict(spec.packet)
    out = {"seed": cfg.seed, "units": cfg.units, "model": model, "output": cfg.output}
    for name in _SECTIONS:
        out[name] = asdict(getattr(cfg, name))
    return out


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def dump_config(cfg: SimConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
