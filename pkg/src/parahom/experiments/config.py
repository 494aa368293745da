"""Experiment configuration: one schema, TOML or JSON on disk.

The [environment] table follows EnvironmentSpec.to_dict; everything else is
flat. Unknown keys are rejected so typos fail loudly (exit code 2 from the
CLI).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from ..environment import EnvironmentSpec

KINDS = ("validate", "estimate-mu", "effective-f", "corrector-decay",
         "homog-rate", "moment-decay")


class ConfigError(ValueError):
    pass


TWO_PHASE_D1 = EnvironmentSpec(
    dimension=1, lam=1.0, Lam=2.0, family="linear",
    controls=((1.0,), (2.0,)), offset_range=(-0.5, 0.5), seed=20240817)


@dataclass(frozen=True)
class ExperimentConfig:
    environment: EnvironmentSpec
    kind: str
    levels: tuple[int, ...] = (0, 1, 2)
    seeds: int = 100
    refinement: int = 9
    ell_grid: tuple[float, ...] = (-1.0, -0.5, 0.0, 0.5, 1.0)
    m_grid: tuple[float, ...] = (-2.0, -1.0, 0.0, 1.0, 2.0)
    M: tuple[float, ...] = (0.0,)
    fbar_tol: float = 1e-3
    fbar_level: int = 2
    fbar_seeds: int = 48
    epsilons: tuple[int, ...] = (1, 2, 3, 4)  # eps = 3^-k
    boundary: str = "quadratic"  # or "abs"
    slack_subadd: float = 0.05
    slack_bounds: float = 0.10
    slack_abp: float = 0.10
    corrector_offset: float = 0.5
    dx_audit: bool = True
    abp_samples: int = 100
    bounds_samples: int = 50
    subadd_samples: int = 50
    lipschitz_samples: int = 200
    vardecay_samples: int = 400
    equality_fields: int = 20
    audit_trials: int = 10_000
    out_dir: str = "out"
    threads: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}")
        if self.refinement < 3:
            raise ConfigError("refinement must be at least 3")
        if self.seeds < 2:
            raise ConfigError("need at least 2 seeds")
        if self.boundary not in ("quadratic", "abs"):
            raise ConfigError("boundary must be 'quadratic' or 'abs'")
        if len(self.M) != self.environment.dimension:
            raise ConfigError("M must list d diagonal entries")
        if any(k < 1 for k in self.epsilons):
            raise ConfigError("epsilon exponents must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def to_dict(self) -> dict:
        return {
            "environment": self.environment.to_dict(),
            "kind": self.kind,
            "levels": list(self.levels),
            "seeds": self.seeds,
            "refinement": self.refinement,
            "ell_grid": list(self.ell_grid),
            "m_grid": list(self.m_grid),
            "M": list(self.M),
            "fbar_tol": self.fbar_tol,
            "fbar_level": self.fbar_level,
            "fbar_seeds": self.fbar_seeds,
            "epsilons": list(self.epsilons),
            "boundary": self.boundary,
            "slack_subadd": self.slack_subadd,
            "slack_bounds": self.slack_bounds,
            "slack_abp": self.slack_abp,
            "corrector_offset": self.corrector_offset,
            "dx_audit": self.dx_audit,
            "abp_samples": self.abp_samples,
            "bounds_samples": self.bounds_samples,
            "subadd_samples": self.subadd_samples,
            "lipschitz_samples": self.lipschitz_samples,
            "vardecay_samples": self.vardecay_samples,
            "equality_fields": self.equality_fields,
            "audit_trials": self.audit_trials,
            "out_dir": self.out_dir,
            "threads": self.threads,
        }


def default_config(kind: str, **overrides) -> ExperimentConfig:
    """Built-in desk-scale defaults (two-phase linear d=1 environment)."""
    base = dict(environment=TWO_PHASE_D1, kind=kind)
    if kind == "validate":
        base.update(levels=(0, 1, 2), seeds=200)
    elif kind == "estimate-mu":
        base.update(levels=(0, 1, 2), seeds=100)
    elif kind == "effective-f":
        base.update(m_grid=(-2.0, -1.0, 0.0, 1.0, 2.0), seeds=48)
    elif kind == "corrector-decay":
        base.update(levels=(1, 2, 3, 4), seeds=20)
    elif kind == "homog-rate":
        base.update(seeds=10, m_grid=(-0.5, 0.0, 0.5, 1.0, 1.5, 2.0))
    elif kind == "moment-decay":
        base.update(levels=(0, 1, 2, 3), seeds=400)
    base.update(overrides)
    return ExperimentConfig(**base)


_FIELDS = set(ExperimentConfig.__dataclass_fields__)


def _from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "kind" not in raw:
        raise ConfigError("config must set 'kind'")
    if "environment" not in raw:
        raise ConfigError("config must set [environment]")
    try:
        env = EnvironmentSpec.from_dict(raw["environment"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad environment table: {exc}") from exc
    kw = {}
    for key, val in raw.items():
        if key == "environment":
            continue
        if isinstance(val, list):
            val = tuple(val)
        kw[key] = val
    try:
        return ExperimentConfig(environment=env, **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_bytes()
    if p.suffix.lower() == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    elif p.suffix.lower() == ".toml":
        try:
            raw = tomllib.loads(text.decode("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
    else:
        raise ConfigError("config must be a .toml or .json file")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table/object")
    return _from_dict(raw)
