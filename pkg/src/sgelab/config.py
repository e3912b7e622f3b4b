"""Run configuration: one TOML document with a flat section per module.

Every value is validated before any environment or policy is built; unknown
sections and keys are rejected.
"""

from __future__ import annotations

import inspect
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envs import ENVIRONMENTS
from .evaluation import BadArguments
from .policy import PolicyConfig
from .train import TrainerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSection:
    name: str = "combination_lock"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PolicySection:
    beta: object = "calibrate"  # float, or "calibrate"
    hidden: int = 0
    init_seed: int = 0
    init_scale: float = 0.02
    junk_penalty: float = -12.0
    reflect_keep: float = 6.0
    reflect_avoid: float = -6.0
    reflect_unknown: float = -1.0
    reflect_positive: float = 4.0

    def policy_config(self, beta: float) -> PolicyConfig:
        d = asdict(self)
        d["beta"] = float(beta)
        return PolicyConfig(**d)


@dataclass(frozen=True)
class CalibrationSection:
    grid: tuple = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0)
    seed: int = 0
    target_k: int = 256
    max_pass_k: float = 0.05
    max_pass_1: float = 0.01
    plateau_k: int = 2048
    max_plateau_gain: float = 0.02


@dataclass(frozen=True)
class SgeSection:
    tau: float = 0.7
    tau_s: float = 1.2
    buffer_size: int = 32
    p_B: float = 0.25
    p_G: float = 0.1
    reflection_mode: str = "episode"


@dataclass(frozen=True)
class EvalSection:
    every: int = 0  # 0: initial and final evaluation only
    attempts: int = 64
    ks: tuple = (1, 2, 4, 8, 16, 32, 64)
    tau: float = 0.7
    splits: tuple = ("train", "test")
    seed: int = 12345


@dataclass(frozen=True)
class RunConfig:
    method: str = "sge"
    updates: int = 500
    seeds: tuple = (0,)
    out: str = "runs"
    env: EnvSection = field(default_factory=EnvSection)
    policy: PolicySection = field(default_factory=PolicySection)
    calibration: CalibrationSection = field(default_factory=CalibrationSection)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    sge: SgeSection = field(default_factory=SgeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sge_given: bool = False  # whether the document set any [sge] key

    @property
    def uses_sge(self) -> bool:
        return self.method == "sge"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("sge_given")
        return d


_SECTIONS = {
    "env": EnvSection,
    "policy": PolicySection,
    "calibration": CalibrationSection,
    "train": TrainerConfig,
    "sge": SgeSection,
    "eval": EvalSection,
}
_RUN_KEYS = {"method", "updates", "seeds", "out"}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def _check_prob(name, v):
    if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
        raise ConfigError(f"{name} must be a probability, got {v!r}")


def _check_pos_int(name, v, allow_zero=False):
    if not isinstance(v, int) or isinstance(v, bool) or v < (0 if allow_zero else 1):
        raise ConfigError(f"{name} must be a {'non-negative' if allow_zero else 'positive'} integer, got {v!r}")


def from_dict(doc: dict) -> RunConfig:
    """Build and validate a RunConfig from a parsed document."""
    doc = dict(doc)
    run = doc.pop("run", {})
    if not isinstance(run, dict):
        raise ConfigError("[run] must be a table")
    unknown = set(run) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown key(s) in [run]: {sorted(unknown)}")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    method = run.get("method", "sge")

    env_doc = dict(doc.get("env", {}))
    env_name = env_doc.pop("name", "combination_lock")
    if env_name not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {env_name!r}; known: {sorted(ENVIRONMENTS)}")
    allowed = set(inspect.signature(ENVIRONMENTS[env_name].__init__).parameters) - {"self"}
    bad = set(env_doc) - allowed
    if bad:
        raise ConfigError(f"unknown key(s) in [env] for {env_name}: {sorted(bad)}")
    for k, v in env_doc.items():
        if not isinstance(v, int) or isinstance(v, bool):
            raise ConfigError(f"[env] {k} must be an integer")
    env = EnvSection(env_name, dict(sorted(env_doc.items())))

    train_doc = dict(doc.get("train", {}))
    train_doc["method"] = method
    trainer = _build(TrainerConfig, train_doc, "train")
    policy = _build(PolicySection, doc.get("policy", {}), "policy")
    calibration = _build(CalibrationSection, doc.get("calibration", {}), "calibration")
    sge = _build(SgeSection, doc.get("sge", {}), "sge")
    ev = _build(EvalSection, doc.get("eval", {}), "eval")

    updates = run.get("updates", 500)
    _check_pos_int("run.updates", updates, allow_zero=True)
    seeds = tuple(run.get("seeds", (0,)))
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("run.seeds must be a non-empty list of non-negative integers")
    out = run.get("out", "runs")
    if not isinstance(out, str):
        raise ConfigError("run.out must be a string")

    if not (policy.beta == "calibrate" or isinstance(policy.beta, (int, float))):
        raise ConfigError("policy.beta must be a number or \"calibrate\"")
    if not calibration.grid:
        raise ConfigError("calibration.grid must not be empty")
    _check_pos_int("calibration.target_k", calibration.target_k)
    _check_pos_int("calibration.plateau_k", calibration.plateau_k)
    for name in ("max_pass_k", "max_pass_1", "max_plateau_gain"):
        _check_prob(f"calibration.{name}", getattr(calibration, name))
    if not (sge.tau > 0 and sge.tau_s > 0):
        raise ConfigError("temperatures must be positive")
    _check_prob("sge.p_B", sge.p_B)
    _check_prob("sge.p_G", sge.p_G)
    _check_pos_int("sge.buffer_size", sge.buffer_size)
    if sge.reflection_mode not in ("episode", "step"):
        raise ConfigError("sge.reflection_mode must be 'episode' or 'step'")
    _check_pos_int("eval.every", ev.every, allow_zero=True)
    _check_pos_int("eval.attempts", ev.attempts)
    if not ev.ks or any(not isinstance(k, int) or not 1 <= k <= ev.attempts for k in ev.ks):
        raise BadArguments(f"eval.ks must be integers in [1, attempts={ev.attempts}]")
    if list(ev.ks) != sorted(set(ev.ks)):
        raise ConfigError("eval.ks must be strictly increasing")
    if not ev.tau > 0:
        raise ConfigError("eval.tau must be positive")
    if not ev.splits or any(s not in ("train", "test") for s in ev.splits):
        raise ConfigError("eval.splits must list 'train' and/or 'test'")
    if policy.hidden < 0:
        raise ConfigError("policy.hidden must be >= 0")

    return RunConfig(
        method=method,
        updates=updates,
        seeds=seeds,
        out=out,
        env=env,
        policy=policy,
        calibration=calibration,
        trainer=trainer,
        sge=sge,
        eval=ev,
        sge_given=bool(doc.get("sge")),
    )


def loads(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_dict(doc)


def load(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text)


def override(config: RunConfig, seed: Optional[int] = None, method: Optional[str] = None,
             out: Optional[str] = None) -> RunConfig:
    """Apply command-line overrides; the result is validated like the document."""
    trainer = config.trainer
    if method is not None:
        try:
            trainer = replace(trainer, method=method)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if seed is not None and (not isinstance(seed, int) or seed < 0):
        raise ConfigError("seed must be a non-negative integer")
    return replace(
        config,
        method=trainer.method,
        trainer=trainer,
        seeds=(seed,) if seed is not None else config.seeds,
        out=out if out is not None else config.out,
    )
