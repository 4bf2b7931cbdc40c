"""Experiment and sweep configuration, read from TOML.

Schema (all tables optional except ``[environment]``)::

    seed = 0            # master seed; repeat k runs with seed + k
    repeats = 20
    out = "runs/gates"

    [environment]       # generator name plus its fields, or name = "file" with path
    name = "gates"
    width = 5

    [policy]
    family = "softmax-linear"   # or "mlp" (then: hidden = 8)
    bound = 20.0

    [learner]
    window = 2          # C'
    n = 2000            # or eps + delta, routed through the sample-size bound
    cap_n = 100000      # larger formula values need an explicit n override
    success_eps = 0.2   # a run counts as a success when its value >= 1 - eps

    [learner.erm]
    restarts = 8
    steps = 300

    [sweep]             # only for the sweep subcommand
    mode = "grid"       # or "paired"
    horizon = [9, 12]
    window = [0, 1, 2]
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .learner import ErmConfig

SCHEMA_VERSION = 1
SWEEP_AXES = {"horizon": "environment", "width": "environment", "gate_period": "environment", "window": "learner", "n": "learner"}
DEFAULT_CAP_N = 100_000


class ConfigError(ValueError):
    """Bad config file or field; the message names the location."""


@dataclass
class LearnerConfig:
    window: int = 2
    n: int | None = None
    eps: float | None = None
    delta: float | None = None
    cap_n: int = DEFAULT_CAP_N
    success_eps: float = 0.2
    erm: ErmConfig = field(default_factory=ErmConfig)


@dataclass
class ExperimentConfig:
    environment: dict
    policy: dict = field(default_factory=lambda: {"family": "softmax-linear", "bound": 20.0})
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    repeats: int = 1
    seed: int = 0
    out: str = "runs"

    def identity_dict(self) -> dict:
        """Everything that determines results; the output directory is excluded."""
        d = asdict(self)
        d.pop("out")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.identity_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def success_eps(self) -> float:
        return self.learner.eps if self.learner.eps is not None else self.learner.success_eps


@dataclass
class SweepConfig:
    base: ExperimentConfig
    axes: dict[str, list]
    mode: str = "grid"


def _check_keys(table: dict, allowed: set, where: str):
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")


def _typed(value, kind, where):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"{where}: expected {kind.__name__}, got {value!r}")
    return value


def _learner_from(table: dict) -> LearnerConfig:
    _check_keys(table, {f.name for f in fields(LearnerConfig)}, "[learner]")
    erm_table = table.get("erm", {})
    _check_keys(erm_table, {f.name for f in fields(ErmConfig)}, "[learner.erm]")
    erm_kwargs = {}
    for f in fields(ErmConfig):
        if f.name in erm_table:
            erm_kwargs[f.name] = _typed(erm_table[f.name], float if f.type == "float" else int, f"learner.erm.{f.name}")
    try:
        erm = ErmConfig(**erm_kwargs)
    except ValueError as exc:
        raise ConfigError(f"[learner.erm]: {exc}") from exc
    out = LearnerConfig(erm=erm)
    for name, kind in (("window", int), ("n", int), ("cap_n", int), ("eps", float), ("delta", float), ("success_eps", float)):
        if name in table:
            setattr(out, name, _typed(table[name], kind, f"learner.{name}"))
    if out.window < 0:
        raise ConfigError("learner.window: must be >= 0")
    if out.n is not None and out.n < 1:
        raise ConfigError("learner.n: must be positive")
    if (out.eps is None) != (out.delta is None):
        raise ConfigError("[learner]: eps and delta must be given together")
    if out.n is None and out.eps is None:
        out.n = 2000
    return out


def experiment_from_dict(data: dict) -> ExperimentConfig:
    _check_keys(data, {"environment", "policy", "learner", "repeats", "seed", "out", "sweep"}, "top level")
    if "environment" not in data:
        raise ConfigError("missing [environment] table")
    env = dict(data["environment"])
    if "name" not in env:
        raise ConfigError("environment.name: required")
    policy = {"family": "softmax-linear", "bound": 20.0, **data.get("policy", {})}
    _check_keys(policy, {"family", "bound", "hidden"}, "[policy]")
    cfg = ExperimentConfig(
        environment=env,
        policy=policy,
        learner=_learner_from(data.get("learner", {})),
        repeats=_typed(data.get("repeats", 1), int, "repeats"),
        seed=_typed(data.get("seed", 0), int, "seed"),
        out=_typed(data.get("out", "runs"), str, "out"),
    )
    if cfg.repeats < 0:
        raise ConfigError("repeats: must be >= 0")
    return cfg


def sweep_from_dict(data: dict) -> SweepConfig:
    base = experiment_from_dict({k: v for k, v in data.items() if k != "sweep"})
    table = dict(data.get("sweep", {}))
    mode = table.pop("mode", "grid")
    if mode not in ("grid", "paired"):
        raise ConfigError(f"sweep.mode: expected 'grid' or 'paired', got {mode!r}")
    _check_keys(table, set(SWEEP_AXES), "[sweep]")
    axes = {}
    for name, values in table.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{name}: expected a non-empty list")
        axes[name] = [_typed(v, int, f"sweep.{name}") for v in values]
    if mode == "paired" and len({len(v) for v in axes.values()}) > 1:
        raise ConfigError("[sweep]: paired mode needs equal axis lengths")
    return SweepConfig(base, axes, mode)


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        # the decoder message already carries "(at line L, column C)"
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc


def apply_axes(base: ExperimentConfig, point: dict) -> ExperimentConfig:
    cfg = copy.deepcopy(base)
    for name, value in point.items():
        if SWEEP_AXES[name] == "environment":
            cfg.environment[name] = value
        else:
            setattr(cfg.learner, name, value)
            if name == "n":
                cfg.learner.eps = cfg.learner.delta = None
    return cfg
