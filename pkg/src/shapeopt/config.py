"""Run configuration: a line-based ``section.key = value`` text format.

Blank lines and ``#`` comments are ignored. Unknown sections or keys are
errors; anything missing takes its default. ``format_config`` writes a file
that parses back to the identical config.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .agent import PpoConfig
from .envloop import RewardMode
from .flow import FlowConfig


class ParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryConfig:
    n: int = 4
    free_points: tuple[int, ...] = (0, 1, 2, 3)
    r_min: float = 0.3
    r_max: float = 3.0
    smoothing: float = 0.5
    samples: int = 32
    half_turn: bool = False

    @property
    def angular_factor(self) -> float:
        return math.pi if self.half_turn else 2.0 * math.pi

    @property
    def n_free(self) -> int:
        return len(self.free_points)


@dataclass(frozen=True)
class RunSection:
    episodes: int = 3000
    seed: int = 0
    workers: int = 1
    outdir: str = "runs/default"
    checkpoint_every: int = 10
    obs_dim: int = 1


@dataclass(frozen=True)
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    agent: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardMode = field(default_factory=RewardMode)
    run: RunSection = field(default_factory=RunSection)

    @property
    def act_dim(self) -> int:
        return 3 * self.geometry.n_free

    def with_run(self, **kw) -> "RunConfig":
        return replace(self, run=replace(self.run, **kw))


SECTIONS = ("geometry", "flow", "agent", "reward", "run")


def _field_map(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in fields(cls) if not f.name.startswith("_")}


def _parse_scalar(text: str, like: Any, name: str, optional: bool) -> Any:
    t = text.strip()
    if optional and t.lower() in ("none", ""):
        return None
    if isinstance(like, bool):
        low = t.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {t!r}")
    if isinstance(like, tuple):
        parts = [p for p in t.replace(",", " ").split() if p]
        elem = like[0] if like else 0
        return tuple(_parse_scalar(p, elem, name, False) for p in parts)
    if isinstance(like, int):
        return int(t)
    if isinstance(like, float):
        return float(t)
    return t


# fields whose default is None, with a sample value giving their type
_OPTIONAL = {("flow", "center"): (0.0, 0.0), ("flow", "t_max"): 0.0, ("flow", "dt_fixed"): 0.0}


def _coerce(section: str, key: str, text: str, default: Any) -> Any:
    name = f"{section}.{key}"
    if (section, key) in _OPTIONAL:
        return _parse_scalar(text, _OPTIONAL[(section, key)], name, True)
    return _parse_scalar(text, default, name, False)


def parse_text(text: str) -> RunConfig:
    base = RunConfig()
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(lineno, f"expected 'section.key = value', got {raw.strip()!r}")
        lhs, rhs = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise ParseError(lineno, f"key {lhs!r} has no section")
        section, key = lhs.split(".", 1)
        if section not in SECTIONS:
            raise ParseError(lineno, f"unknown section {section!r}")
        known = _field_map(type(getattr(base, section)))
        if key not in known:
            raise ParseError(lineno, f"unknown key {lhs!r}")
        if key in updates[section]:
            raise ParseError(lineno, f"duplicate key {lhs!r}")
        try:
            updates[section][key] = _coerce(section, key, rhs, getattr(getattr(base, section), key))
        except ValueError as exc:
            raise ParseError(lineno, str(exc)) from None
    try:
        sections = {s: replace(getattr(base, s), **updates[s]) for s in SECTIONS}
    except (ValueError, TypeError) as exc:
        raise ValidationError(str(exc)) from None
    cfg = RunConfig(**sections)
    validate_config(cfg)
    return cfg


def parse_config(path: str | Path) -> RunConfig:
    return parse_text(Path(path).read_text())


def validate_config(cfg: RunConfig) -> None:
    g, f, r = cfg.geometry, cfg.flow, cfg.run
    checks = [
        (g.n >= 3, "geometry.n must be >= 3"),
        (0.0 < g.r_min < 1.0, "geometry.r_min must satisfy 0 < r_min < 1"),
        (g.r_max > 0.0, "geometry.r_max must be > 0"),
        (0.0 <= g.smoothing <= 1.0, "geometry.smoothing must lie in [0, 1]"),
        (g.samples >= 2, "geometry.samples must be >= 2"),
        (all(0 <= i < g.n for i in g.free_points), "geometry.free_points must index points 0..n-1"),
        (len(set(g.free_points)) == len(g.free_points), "geometry.free_points must be distinct"),
        (f.nx >= 8 and f.ny >= 8, "flow.nx and flow.ny must be >= 8"),
        (f.length > 0 and f.width > 0, "flow.length and flow.width must be > 0"),
        (f.v_in > 0 and f.rho > 0 and f.re_ref > 0, "flow.v_in, flow.rho, flow.re_ref must be > 0"),
        (f.dt_fixed is None or f.dt_fixed > 0, "flow.dt_fixed must be > 0"),
        (0.0 < f.cfl, "flow.cfl must be > 0"),
        (f.t_max is None or f.t_max > 0, "flow.t_max must be > 0"),
        (r.episodes >= 0, "run.episodes must be >= 0"),
        (r.workers >= 1, "run.workers must be >= 1"),
        (r.checkpoint_every >= 1, "run.checkpoint_every must be >= 1"),
        (r.obs_dim >= 1, "run.obs_dim must be >= 1"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ValidationError(msg)


def _format_value(v: Any) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for s in SECTIONS:
        sec = getattr(cfg, s)
        for name in _field_map(type(sec)):
            lines.append(f"{s}.{name} = {_format_value(getattr(sec, name))}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg: RunConfig, outdir: str | Path) -> Path:
    path = Path(outdir) / "resolved.cfg"
    path.write_text(format_config(cfg))
    return path


RECIPE_DIR = Path(__file__).resolve().parent / "recipes"


def recipe_path(name: str) -> Path:
    path = RECIPE_DIR / f"{name}.cfg"
    if not path.exists():
        raise FileNotFoundError(f"no recipe named {name!r}")
    return path


def load_recipe(name: str) -> RunConfig:
    return parse_config(recipe_path(name))
