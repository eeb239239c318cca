"""Run configuration: YAML schema, defaults, validation with line diagnostics."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .evolve import TOWNES_MASS, SolverConfig


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, msg: str, line: Optional[int] = None, path: str = ""):
        self.line = line
        self.path = path
        where = f"line {line}: " if line else ""
        key = f"{path}: " if path else ""
        super().__init__(f"{where}{key}{msg}")


@dataclass(frozen=True)
class GridSection:
    n: int = 512
    L: float = 12.0


@dataclass(frozen=True)
class SolverSection:
    dt_safety: float = 0.005
    dealias: bool = True
    max_steps: int = 200000
    lambda_floor: float = 4.0
    boundary_mass_cap: float = 1e-6
    t_max: float = math.inf
    dt_max: float = 1e-2
    snapshot_stride: int = 10

    def to_solver(self) -> SolverConfig:
        return SolverConfig(**asdict(self))


@dataclass(frozen=True)
class ProfileSection:
    b0: float = 0.15
    eta: float = 0.01
    a: float = 0.1
    C: float = 10.0
    db: float = 0.01
    b_max: float = 0.3


@dataclass(frozen=True)
class Eps0Section:
    kind: str = "zero"  # zero | gaussian-bump | from-file
    amplitude: float = 0.0
    width: float = 1.0
    path: str = ""


@dataclass(frozen=True)
class SpecSection:
    shape: str = "log-corrected"
    K_max: Optional[int] = None  # None: grid-resolvability default
    normalize: bool = True
    window_kind: str = "quintic"
    overlap: float = 0.5
    log_power: float = 2.0


@dataclass(frozen=True)
class DataSection:
    lambda0: float = 0.5
    x0: tuple = (0.0, 0.0)
    gamma0: float = 0.0
    eps0: Eps0Section = Eps0Section()
    mass_ratio: Optional[float] = 1.05  # rescale a0 to this multiple of ||Q||^2; None keeps it
    alpha: float = 0.05
    seed: int = 0
    alpha_star_ratio: float = 0.2  # mass-excess cap in units of ||Q||^2
    desk_scale_override: bool = False
    spec: SpecSection = SpecSection()


@dataclass(frozen=True)
class IMethodSection:
    s: float = 0.1
    delta: float = 0.05


@dataclass(frozen=True)
class EnsembleSection:
    n_samples: int = 2000
    seed_base: int = 0
    observables: tuple = ("l2sq", "strichartz", "linf_weighted_g")
    T_obs: float = 1.0
    n_times: int = 64
    q: float = 4.0
    r: float = 4.0
    eps: float = 0.1
    grid_n: int = 64
    grid_L: float = 8.0


@dataclass(frozen=True)
class OutputSection:
    dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    grid: GridSection = GridSection()
    solver: SolverSection = SolverSection()
    profile: ProfileSection = ProfileSection()
    data: DataSection = DataSection()
    imethod: IMethodSection = IMethodSection()
    ensemble: EnsembleSection = EnsembleSection()
    outputs: OutputSection = OutputSection()

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def alpha_star(self) -> float:
        return self.data.alpha_star_ratio * TOWNES_MASS

    def regime_check(self) -> dict:
        """Compare lambda0 with ``exp(-exp(2 pi / (3 b0)))`` in log form."""
        b0, lam0 = self.profile.b0, self.data.lambda0
        log_bound = -math.exp(min(2 * math.pi / (3 * b0), 700.0))
        holds = math.log(lam0) <= log_bound
        return {"lambda0": lam0, "log_lambda0": math.log(lam0), "log_bound": log_bound,
                "holds": holds, "desk_scale_override": self.data.desk_scale_override}


def _plain(v: Any) -> Any:
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return ".inf" if v > 0 else "-.inf"
    return v


# Parsing -----------------------------------------------------------------------------

def _line_map(node, path=(), out=None) -> dict:
    """Map key paths of a composed YAML tree to 1-based line numbers."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            out[path + (k.value,)] = k.start_mark.line + 1
            _line_map(v, path + (k.value,), out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


def _coerce(value: Any, default: Any, name: str, where: str, line: Optional[int]) -> Any:
    def bad(expect):
        raise ConfigError(f"expected {expect}, got {value!r}", line, where)

    if isinstance(default, bool):
        if not isinstance(value, bool):
            bad("a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            bad("an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, str) and value in (".inf", "inf"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad("a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            bad("a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            bad("a list")
        return tuple(value)
    return value


_OPTIONAL = {("data", "spec", "K_max"): int, ("data", "mass_ratio"): float}


def _build(cls, raw: Any, path: tuple, lines: dict):
    where = ".".join(map(str, path)) or "<root>"
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", lines.get(path), where)
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", lines.get(path + (key,)), where)
    kw = {}
    defaults = cls()
    for name, f in known.items():
        default = getattr(defaults, name)
        if name not in raw:
            continue
        p = path + (name,)
        line = lines.get(p)
        val = raw[name]
        if hasattr(default, "__dataclass_fields__"):
            kw[name] = _build(type(default), val, p, lines)
        elif p in _OPTIONAL:
            kw[name] = None if val is None else _coerce(val, _OPTIONAL[p](0), name, ".".join(p), line)
        else:
            kw[name] = _coerce(val, default, name, ".".join(map(str, p)), line)
    return cls(**kw)


def _validate(cfg: RunConfig, lines: dict) -> None:
    def need(cond, msg, *path):
        if not cond:
            raise ConfigError(msg, lines.get(tuple(path)), ".".join(path))

    g, p, d = cfg.grid, cfg.profile, cfg.data
    need(g.n >= 8 and g.n & (g.n - 1) == 0, "must be a power of two >= 8", "grid", "n")
    need(g.L > 0, "must be positive", "grid", "L")
    need(0 < p.b0 <= 0.3, "b0 must lie in (0, 0.3]", "profile", "b0")
    need(0 < p.eta <= 0.1, "eta must lie in (0, 0.1]", "profile", "eta")
    need(0 < p.b_max <= 0.3 and p.b0 <= p.b_max, "b_max must lie in [b0, 0.3]", "profile", "b_max")
    need(p.db > 0, "must be positive", "profile", "db")
    need(d.lambda0 > 0, "must be positive", "data", "lambda0")
    need(len(d.x0) == 2, "must have two components", "data", "x0")
    need(d.alpha >= 0, "alpha must be non-negative", "data", "alpha")
    need(0 <= d.seed < 2**64, "must be an unsigned 64-bit integer", "data", "seed")
    need(d.mass_ratio is None or d.mass_ratio > 0, "must be positive", "data", "mass_ratio")
    need(d.eps0.kind in ("zero", "gaussian-bump", "from-file"), "unknown eps0 kind", "data", "eps0", "kind")
    need(d.eps0.kind != "from-file" or d.eps0.path, "from-file needs a path", "data", "eps0", "path")
    need(d.spec.shape in ("log-corrected", "pure-inverse"), "unknown shape", "data", "spec", "shape")
    need(0 < d.spec.overlap <= 1, "overlap must lie in (0, 1]", "data", "spec", "overlap")
    need(d.spec.K_max is None or d.spec.K_max >= 4, "K_max must be at least 4", "data", "spec", "K_max")
    need(0 < cfg.imethod.s < 1, "s must lie in (0, 1)", "imethod", "s")
    need(cfg.imethod.delta >= 0, "must be non-negative", "imethod", "delta")
    e = cfg.ensemble
    need(e.n_samples >= 1, "must be positive", "ensemble", "n_samples")
    need(e.T_obs > 0, "must be positive", "ensemble", "T_obs")
    try:
        cfg.solver.to_solver()
    except ValueError as exc:
        raise ConfigError(str(exc), lines.get(("solver",)), "solver") from None


def parse_config(text: str) -> RunConfig:
    """Parse YAML text into a validated :class:`RunConfig` with defaults filled."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"YAML syntax error: {exc.problem}", line) from None
    lines = _line_map(node) if node is not None else {}
    cfg = _build(RunConfig, raw, (), lines)
    _validate(cfg, lines)
    return cfg


def load_config(path: Union[str, Path]) -> RunConfig:
    return parse_config(Path(path).read_text())


def with_overrides(cfg: RunConfig, seed: Optional[int] = None, override_desk_scale: bool = False,
                   out: Optional[str] = None) -> RunConfig:
    data = cfg.data
    if seed is not None:
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", path="--seed")
        data = replace(data, seed=seed)
    if override_desk_scale:
        data = replace(data, desk_scale_override=True)
    outputs = replace(cfg.outputs, dir=out) if out is not None else cfg.outputs
    return replace(cfg, data=data, outputs=outputs)
