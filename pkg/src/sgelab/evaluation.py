"""pass@k estimation, distinct-outcome curves and the evaluation harness."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from math import comb
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import TRAIN, Trajectory
from .envs import Env
from .policy import Policy, PolicyConfig, build_base_policy
from .sge import EpisodeStreams, rollout


class BadArguments(ValueError):
    pass


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k: ``1 - C(n-c, k) / C(n, k)``.

    Evaluated as an exact rational and rounded once, so the result is the
    correctly rounded value of the estimator.
    """
    if not (isinstance(n, (int, np.integer)) and isinstance(c, (int, np.integer)) and isinstance(k, (int, np.integer))):
        raise BadArguments("n, c, k must be integers")
    if not 1 <= k <= n:
        raise BadArguments(f"need 1 <= k <= n, got k={k}, n={n}")
    if not 0 <= c <= n:
        raise BadArguments(f"need 0 <= c <= n, got c={c}, n={n}")
    if n - c < k:
        return 1.0
    return float(1 - Fraction(comb(n - c, k), comb(n, k)))


def default_ks(n: int) -> list:
    ks, k = [], 1
    while k <= n:
        ks.append(k)
        k *= 2
    return ks


@dataclass
class EvalResult:
    split: str
    seed: int
    tasks: list  # (task_id, n, c)
    ks: list
    pass_at: dict = field(default_factory=dict)
    attempts: Optional[dict] = None  # task_id -> per-attempt rewards, when kept

    def __post_init__(self):
        for _, n, c in self.tasks:
            if not 0 <= c <= n:
                raise ValueError("need 0 <= c <= n")
        if not self.pass_at:
            self.pass_at = pass_curve(self, self.ks)

    def per_task(self, k: int) -> list:
        return [pass_at_k(n, c, k) for _, n, c in self.tasks]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["task_id", "n", "c"] + [f"pass@{k}" for k in self.ks] + ["split"])
            for task_id, n, c in self.tasks:
                w.writerow([task_id, n, c] + [repr(pass_at_k(n, c, k)) for k in self.ks] + [self.split])

    def summary(self) -> dict:
        return {
            "split": self.split,
            "seed": self.seed,
            "n_tasks": len(self.tasks),
            "attempts": self.tasks[0][1] if self.tasks else 0,
            "pass_at": {str(k): v for k, v in self.pass_at.items()},
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def pass_curve(results, ks: Sequence[int]) -> dict:
    """Mean pass@k over tasks for each k.

    ``results`` is an :class:`EvalResult` or an iterable of ``(n, c)`` pairs.
    """
    pairs = [(n, c) for _, n, c in results.tasks] if isinstance(results, EvalResult) else list(results)
    if not pairs:
        return {k: 0.0 for k in ks}
    return {k: float(np.mean([pass_at_k(n, c, k) for n, c in pairs])) for k in ks}


class DistinctOutcomes:
    """Running count of unique episode outcome sequences, per task."""

    def __init__(self):
        self._seen: dict = {}

    def add(self, task_id: int, outcome_seq) -> int:
        s = self._seen.setdefault(task_id, set())
        s.add(tuple(outcome_seq))
        return len(s)

    def add_trajectory(self, traj: Trajectory) -> int:
        return self.add(traj.goal.task_id, traj.outcome_sequence())

    def count(self, task_id: int) -> int:
        return len(self._seen.get(task_id, ()))

    def mean(self) -> float:
        return float(np.mean([len(s) for s in self._seen.values()])) if self._seen else 0.0


def distinct_outcomes(stream: Iterable) -> np.ndarray:
    """Cumulative mean-over-tasks distinct outcome count after each sample.

    ``stream`` yields trajectories or ``(task_id, outcome_sequence)`` pairs in
    collection order.
    """
    tracker = DistinctOutcomes()
    out = []
    for item in stream:
        if isinstance(item, Trajectory):
            tracker.add_trajectory(item)
        else:
            tracker.add(*item)
        out.append(tracker.mean())
    return np.array(out)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SGELAB_THREADS", "1")))
    except ValueError:
        return 1


def _eval_tasks(policy, env, goals, n, seed, tau, tau_s):
    all_goals = [g for g in goals for _ in range(n)]
    task_ids = [g.task_id for g in all_goals]
    attempts = [a for _ in goals for a in range(n)]
    streams = EpisodeStreams.derived([seed] * len(all_goals), task_ids, attempts)
    seeds = [int(g.integers(0, 2**31 - 1)) for g in streams.generators]
    summary = rollout(policy, env, all_goals, seeds, tau, tau_s, streams, record=False)
    r = summary.rewards.reshape(len(goals), n)
    return [(g.task_id, n, int(ri.sum()), ri.astype(np.int8)) for g, ri in zip(goals, r)]


def evaluate(
    policy: Policy,
    env: Env,
    split: str,
    n: int,
    seed: int,
    tau: float = 0.7,
    tau_s: Optional[float] = None,
    ks: Optional[Sequence[int]] = None,
    chunk_tasks: int = 8,
    keep_attempts: bool = False,
) -> EvalResult:
    """``n`` attempts per task without reflection.

    Every token is sampled at ``tau`` unless ``tau_s`` is given, in which case
    strategy tokens use ``tau_s``. Attempt ``a`` of task ``t`` draws from a
    generator seeded by ``(seed, t, a)``, so results do not depend on chunking
    or on the number of worker threads (``SGELAB_THREADS``). With
    ``keep_attempts`` the per-attempt rewards are kept in ``attempts``.
    """
    if n < 1:
        raise BadArguments("need n >= 1")
    ks = list(ks) if ks is not None else default_ks(n)
    if any(not 1 <= k <= n for k in ks):
        raise BadArguments(f"every k must satisfy 1 <= k <= n={n}")
    goals = env.tasks(split)
    tau_s = tau if tau_s is None else tau_s
    chunks = [goals[i : i + chunk_tasks] for i in range(0, len(goals), chunk_tasks)]
    threads = min(_threads(), len(chunks))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            # each worker gets its own env instance pool
            parts = pool.map(lambda ch: _eval_tasks(policy, env.clone(), ch, n, seed, tau, tau_s), chunks)
            tasks = [row for part in parts for row in part]
    else:
        tasks = [row for ch in chunks for row in _eval_tasks(policy, env, ch, n, seed, tau, tau_s)]
    attempts = {row[0]: row[3] for row in tasks} if keep_attempts else None
    return EvalResult(split, seed, [row[:3] for row in tasks], ks, attempts=attempts)


@dataclass
class CalibrationReport:
    beta: float
    rows: list  # dicts: beta, pass@1, pass@k_target, pass@k_plateau
    target_k: int
    plateau_k: int

    def to_dict(self) -> dict:
        return {"beta": self.beta, "target_k": self.target_k, "plateau_k": self.plateau_k, "rows": self.rows}


def calibrate_concentration(
    env: Env,
    config: PolicyConfig,
    grid: Sequence[float],
    seed: int = 0,
    tau: float = 0.7,
    target_k: int = 256,
    max_pass_k: float = 0.05,
    max_pass_1: float = 0.01,
    plateau_k: int = 2048,
    max_plateau_gain: float = 0.02,
    split: str = TRAIN,
) -> CalibrationReport:
    """Smallest grid ``beta`` whose base policy is concentrated enough.

    A value qualifies when the measured train pass@1 and pass@``target_k``
    are under their caps and pass@k has plateaued: pass@``plateau_k`` exceeds
    pass@``target_k`` by at most ``max_plateau_gain``.
    """
    n = max(target_k, plateau_k)
    rows = []
    for beta in sorted(grid):
        policy = build_base_policy(env, replace(config, beta=float(beta)))
        res = evaluate(policy, env, split, n, seed, tau, ks=[1, target_k, plateau_k])
        row = {
            "beta": float(beta),
            "pass@1": res.pass_at[1],
            f"pass@{target_k}": res.pass_at[target_k],
            f"pass@{plateau_k}": res.pass_at[plateau_k],
        }
        rows.append(row)
        ok = (
            res.pass_at[1] <= max_pass_1
            and res.pass_at[target_k] <= max_pass_k
            and res.pass_at[plateau_k] - res.pass_at[target_k] <= max_plateau_gain
        )
        if ok:
            return CalibrationReport(float(beta), rows, target_k, plateau_k)
    raise RuntimeError(f"no beta in {list(grid)} meets the calibration targets: {rows}")
