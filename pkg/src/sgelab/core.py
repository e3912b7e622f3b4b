"""Domain types shared by every module, trajectory validation and returns."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

STRATEGY = "strategy"
REMAINDER = "remainder"
SEGMENTS = (STRATEGY, REMAINDER)

TRAIN = "train"
TEST = "test"
SPLITS = (TRAIN, TEST)

POSITIVE = "positive"
NEGATIVE = "negative"


class InvariantViolation(ValueError):
    """Raised by :func:`validate_trajectory`; ``name`` identifies the invariant."""

    def __init__(self, name: str, detail: str = ""):
        self.name = name
        super().__init__(f"{name}: {detail}" if detail else name)


@dataclass(frozen=True)
class EnvSpec:
    name: str
    vocab_size: int
    strategy_len: int
    remainder_len: int
    horizon: int
    obs_dim: int
    n_train: int
    n_test: int

    def __post_init__(self):
        for key in ("vocab_size", "horizon", "obs_dim", "n_train", "n_test"):
            if getattr(self, key) <= 0:
                raise ValueError(f"EnvSpec.{key} must be positive")
        if self.strategy_len < 1 or self.remainder_len < 1:
            raise ValueError("segment lengths must be >= 1")

    @property
    def n_tasks(self) -> int:
        return self.n_train + self.n_test

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vocab_size": self.vocab_size,
            "strategy_len": self.strategy_len,
            "remainder_len": self.remainder_len,
            "horizon": self.horizon,
            "obs_dim": self.obs_dim,
            "n_train": self.n_train,
            "n_test": self.n_test,
        }


@dataclass(frozen=True)
class Goal:
    task_id: int
    split: str = TRAIN

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Observation:
    step_index: int
    features: np.ndarray
    raw_feedback: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(self.features))
        if self.raw_feedback is not None:
            object.__setattr__(self, "raw_feedback", tuple(int(x) for x in self.raw_feedback))

    def __eq__(self, other):
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            self.step_index == other.step_index
            and self.raw_feedback == other.raw_feedback
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True)
class TokenEvent:
    token: int
    logprob: float
    temperature: float
    segment: str


@dataclass(frozen=True)
class Step:
    observation: Observation
    strategy: tuple
    remainder: tuple
    action: tuple
    outcome: int
    reflection: Optional["ReflectionContext"] = None


@dataclass(frozen=True)
class StrategyRecord:
    """A finished episode's per-step strategy tokens plus its outcome."""

    task_id: int
    strategies: tuple
    success: bool
    feedback: tuple = ()
    update_index: int = 0


@dataclass(frozen=True)
class ReflectionContext:
    polarity: str
    record: StrategyRecord

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"bad polarity {self.polarity!r}")
        if (self.polarity == POSITIVE) != self.record.success:
            raise ValueError("positive reflection needs a success record and vice versa")


@dataclass(frozen=True)
class Trajectory:
    goal: Goal
    steps: tuple
    terminal_reward: float
    seed: int
    reflection: Optional[ReflectionContext] = None
    strategy_dropout: bool = False
    final_feedback: tuple = ()

    def __post_init__(self):
        if self.terminal_reward not in (0, 1):
            raise ValueError("terminal_reward must be 0 or 1")
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "terminal_reward", float(self.terminal_reward))

    @property
    def success(self) -> bool:
        return self.terminal_reward == 1.0

    def strategy_tokens(self) -> tuple:
        return tuple(tuple(ev.token for ev in s.strategy) for s in self.steps)

    def outcome_sequence(self) -> tuple:
        return tuple(s.outcome for s in self.steps)

    def token_events(self):
        for s in self.steps:
            yield from s.strategy
            yield from s.remainder

    def to_record(self) -> dict:
        return {
            "task_id": self.goal.task_id,
            "split": self.goal.split,
            "seed": self.seed,
            "terminal_reward": self.terminal_reward,
            "steps": [_step_record(s) for s in self.steps],
        }


@dataclass(frozen=True)
class Group:
    goal: Goal
    trajectories: tuple
    advantages: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if any(t.goal != self.goal for t in self.trajectories):
            raise ValueError("all trajectories in a group must share the goal")
        if self.advantages is not None:
            if len(self.advantages) != len(self.trajectories):
                raise ValueError("advantage count must equal group size")
            object.__setattr__(self, "advantages", tuple(float(a) for a in self.advantages))

    @property
    def K(self) -> int:
        return len(self.trajectories)

    def rewards(self) -> np.ndarray:
        return np.array([t.terminal_reward for t in self.trajectories])


def _step_record(step: Step) -> dict:
    return {
        "step_index": step.observation.step_index,
        "features": step.observation.features.tolist(),
        "raw_feedback": None if step.observation.raw_feedback is None else list(step.observation.raw_feedback),
        "strategy": [[e.token, e.logprob, e.temperature] for e in step.strategy],
        "remainder": [[e.token, e.logprob, e.temperature] for e in step.remainder],
        "action": list(step.action),
        "outcome": step.outcome,
    }


def trajectory_from_record(rec: dict) -> Trajectory:
    steps = []
    for s in rec["steps"]:
        obs = Observation(s["step_index"], s["features"], s["raw_feedback"])
        strat = tuple(TokenEvent(int(t), float(lp), float(tau), STRATEGY) for t, lp, tau in s["strategy"])
        rem = tuple(TokenEvent(int(t), float(lp), float(tau), REMAINDER) for t, lp, tau in s["remainder"])
        steps.append(Step(obs, strat, rem, tuple(s["action"]), int(s["outcome"])))
    return Trajectory(Goal(int(rec["task_id"]), rec["split"]), tuple(steps), rec["terminal_reward"], int(rec["seed"]))


def dumps_trajectory(traj: Trajectory) -> str:
    return json.dumps(traj.to_record(), sort_keys=True, separators=(",", ":"))


def write_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(dumps_trajectory(t))
            fh.write("\n")


def read_trajectories(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [trajectory_from_record(json.loads(line)) for line in fh if line.strip()]


def validate_trajectory(traj: Trajectory, env_spec: EnvSpec) -> None:
    """Check every Trajectory invariant against ``env_spec``.

    Returns None when the trajectory is well formed; raises
    :class:`InvariantViolation` naming the first failed invariant otherwise.
    """
    if not traj.steps:
        raise InvariantViolation("steps", "trajectory has no steps")
    if len(traj.steps) > env_spec.horizon:
        raise InvariantViolation("horizon", f"{len(traj.steps)} > {env_spec.horizon}")
    if traj.goal.split == TRAIN:
        if not 0 <= traj.goal.task_id < env_spec.n_train:
            raise InvariantViolation("task_id")
    elif not env_spec.n_train <= traj.goal.task_id < env_spec.n_tasks:
        raise InvariantViolation("task_id")
    if traj.terminal_reward not in (0.0, 1.0):
        raise InvariantViolation("terminal_reward")
    for i, step in enumerate(traj.steps):
        obs = step.observation
        if obs.features.shape != (env_spec.obs_dim,):
            raise InvariantViolation("observation dim", f"step {i}")
        if not 1 <= obs.step_index <= env_spec.horizon:
            raise InvariantViolation("step_index", f"step {i}")
        if not step.strategy or not step.remainder:
            raise InvariantViolation("token lists", f"step {i} has an empty segment")
        if len(step.strategy) != env_spec.strategy_len or len(step.remainder) != env_spec.remainder_len:
            raise InvariantViolation("segment length", f"step {i}")
        for ev, seg in [(e, STRATEGY) for e in step.strategy] + [(e, REMAINDER) for e in step.remainder]:
            if not 0 <= ev.token < env_spec.vocab_size:
                raise InvariantViolation("token range", f"token {ev.token} at step {i}")
            if ev.segment != seg:
                raise InvariantViolation("segment tag", f"step {i}")
            if not ev.logprob <= 0.0 or not np.isfinite(ev.logprob):
                raise InvariantViolation("logprob", f"step {i}")
            if not ev.temperature > 0.0:
                raise InvariantViolation("temperature", f"step {i}")


def episode_return(traj: Trajectory) -> float:
    """Undiscounted return; the only reward is the terminal one."""
    return float(traj.terminal_reward)


def check_temperatures(trajectories: Sequence[Trajectory], tau: float, tau_s: float) -> int:
    """Count token events whose recorded temperature disagrees with its segment."""
    bad = 0
    for traj in trajectories:
        for ev in traj.token_events():
            want = tau_s if ev.segment == STRATEGY else tau
            bad += ev.temperature != want
    return bad
