"""Strategy-guided exploration: mixed-temperature group rollouts with
FIFO strategy buffers and reflection conditioning."""

from __future__ import annotations

import weakref
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import kernels
from .core import (
    NEGATIVE,
    POSITIVE,
    REMAINDER,
    STRATEGY,
    Goal,
    Group,
    ReflectionContext,
    Step,
    StrategyRecord,
    TokenEvent,
    Trajectory,
)
from .envs import Env
from .policy import Policy, head_forward, logits, tempered_probs

EPISODE = "episode"
PER_STEP = "step"


class StrategyBuffer:
    """Per-task FIFO of strategy records; each task holds at most ``capacity``."""

    def __init__(self, capacity: int = 32):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._by_task: dict = {}

    def push(self, record: StrategyRecord) -> "StrategyBuffer":
        q = self._by_task.setdefault(record.task_id, deque(maxlen=self.capacity))
        q.append(record)
        return self

    def records(self, task_id: int) -> tuple:
        return tuple(self._by_task.get(task_id, ()))

    def tasks(self) -> list:
        return sorted(self._by_task)

    def __len__(self):
        return sum(len(q) for q in self._by_task.values())

    def snapshot(self) -> dict:
        return {t: tuple(q) for t, q in sorted(self._by_task.items())}


class Buffers(NamedTuple):
    good: StrategyBuffer
    bad: StrategyBuffer

    @classmethod
    def empty(cls, capacity: int = 32) -> "Buffers":
        return cls(StrategyBuffer(capacity), StrategyBuffer(capacity))


def buffer_push(buffer: StrategyBuffer, record: StrategyRecord) -> StrategyBuffer:
    return buffer.push(record)


def record_from(traj: Trajectory, update_index: int = 0) -> StrategyRecord:
    return StrategyRecord(
        traj.goal.task_id, traj.strategy_tokens(), traj.success, traj.final_feedback, update_index
    )


def route(buffers: Buffers, traj: Trajectory, update_index: int = 0) -> None:
    """Store a finished trajectory's strategies in the success or failure buffer."""
    (buffers.good if traj.success else buffers.bad).push(record_from(traj, update_index))


def draw_reflection(buffers: Buffers, task_id: int, p_B: float, p_G: float,
                    rng: np.random.Generator) -> Optional[ReflectionContext]:
    """Negative reflection with probability ``p_B``, else positive with ``p_G``.

    Drawing from an empty buffer gives no reflection; it does not fall
    through to the other buffer.
    """
    if not (0.0 <= p_B <= 1.0 and 0.0 <= p_G <= 1.0):
        raise ValueError("reflection probabilities must lie in [0, 1]")
    if rng.random() < p_B:
        recs = buffers.bad.records(task_id)
        return ReflectionContext(NEGATIVE, recs[rng.integers(len(recs))]) if recs else None
    if rng.random() < p_G:
        recs = buffers.good.records(task_id)
        return ReflectionContext(POSITIVE, recs[rng.integers(len(recs))]) if recs else None
    return None


# -- batched rollout engine ------------------------------------------------------

_POOLS: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def env_instances(env: Env, n: int) -> list:
    """``n`` independent instances of ``env`` (cached clones, reused across calls)."""
    pool = _POOLS.setdefault(env, [])
    while len(pool) < n:
        pool.append(env.clone())
    return pool[:n]


class EpisodeStreams:
    """One independent generator per episode.

    Passing this as ``rng`` to :func:`rollout` makes every episode's draws
    independent of which other episodes share the batch.
    """

    def __init__(self, generators):
        self.generators = list(generators)

    @classmethod
    def derived(cls, *keys_per_episode):
        return cls(np.random.default_rng(list(k)) for k in zip(*keys_per_episode))

    def __len__(self):
        return len(self.generators)


def _uniforms(rng, active, count) -> np.ndarray:
    if isinstance(rng, EpisodeStreams):
        return np.array([rng.generators[i].random(count) for i in active]).reshape(len(active), count)
    return rng.random((len(active), count))


@dataclass
class RolloutSummary:
    """Lightweight rollout result used when full trajectories are not needed."""

    rewards: np.ndarray
    outcomes: list


ROLLOUT_BLOCK = 512


def rollout(
    policy: Policy,
    env: Env,
    goals: Sequence[Goal],
    seeds: Sequence[int],
    tau: float,
    tau_s: float,
    rng,
    reflections: Optional[Sequence] = None,
    dropouts: Optional[Sequence[bool]] = None,
    record: bool = True,
    per_step_draw=None,
):
    """Run ``len(goals)`` episodes and return trajectories.

    Episodes run in lockstep within consecutive blocks of ``ROLLOUT_BLOCK``;
    the block size is fixed so a draw sequence never depends on how many
    environment instances a backend can hold at once.

    ``reflections[i]`` conditions every step of episode ``i``. With
    ``per_step_draw`` set (a callable ``(i, t) -> reflection``), reflection is
    redrawn at every step instead. ``rng`` is a Generator shared by the batch
    or an :class:`EpisodeStreams`. ``record=False`` skips building
    Trajectory objects and returns a :class:`RolloutSummary`.
    """
    n = len(goals)
    reflections = list(reflections) if reflections is not None else [None] * n
    dropouts = np.zeros(n, dtype=bool) if dropouts is None else np.asarray(dropouts, dtype=bool)
    parts = []
    for lo in range(0, n, ROLLOUT_BLOCK):
        hi = min(n, lo + ROLLOUT_BLOCK)
        sub_rng = EpisodeStreams(rng.generators[lo:hi]) if isinstance(rng, EpisodeStreams) else rng
        draw = None
        if per_step_draw is not None:
            draw = (lambda off: (lambda i, t: per_step_draw(i + off, t)))(lo)
        parts.append(
            _rollout_block(policy, env, goals[lo:hi], seeds[lo:hi], tau, tau_s, sub_rng,
                           reflections[lo:hi], dropouts[lo:hi], record, draw)
        )
    if record:
        return [t for p in parts for t in p]
    return RolloutSummary(
        np.concatenate([p.rewards for p in parts]) if parts else np.zeros(0),
        [o for p in parts for o in p.outcomes],
    )


def _rollout_block(
    policy: Policy,
    env: Env,
    goals: Sequence[Goal],
    seeds: Sequence[int],
    tau: float,
    tau_s: float,
    rng: np.random.Generator,
    reflections: Optional[Sequence] = None,
    dropouts: Optional[Sequence[bool]] = None,
    record: bool = True,
    per_step_draw=None,
):
    layout, params, enc = policy.layout, policy.params, policy.encoder
    V, Ls, Lr, C = layout.vocab_size, layout.strategy_len, layout.remainder_len, layout.ctx_dim
    n = len(goals)
    envs = env_instances(env, n)
    obs = [e.reset(g, int(s)) for e, g, s in zip(envs, goals, seeds)]
    active = np.arange(n)
    rewards = np.zeros(n)
    outcomes = [[] for _ in range(n)]
    steps = [[] for _ in range(n)] if record else None
    final_fb = [()] * n
    head_s, head_r = params.head(STRATEGY), params.head(REMAINDER)

    t = 0
    while active.size:
        m = active.size
        step_refl = []
        ctx = np.empty((m, C))
        for row, i in enumerate(active):
            refl = per_step_draw(i, t) if per_step_draw is not None else reflections[i]
            step_refl.append(refl)
            ctx[row] = enc.context(obs[i].features, refl, t)

        u_s, u_r = _uniforms(rng, active, Ls), _uniforms(rng, active, Lr)
        emitted = np.zeros((m, Ls), dtype=np.int64)
        s_lp = np.zeros((m, Ls))
        rows = np.arange(m)
        for k in range(Ls):
            X = np.zeros((m, layout.strat_in))
            X[:, :C] = ctx
            for j in range(k):
                X[rows, C + j * V + emitted[:, j]] = 1.0
            X[:, C + Ls * V + k] = 1.0
            z, _ = head_forward(head_s, X)
            emitted[:, k], s_lp[:, k] = kernels.sample_rows(z, np.full(m, tau_s), u_s[:, k])

        Xr = np.zeros((m, Lr, layout.rem_in))
        Xr[:, :, :C] = ctx[:, None, :]
        keep = ~dropouts[active]
        for j in range(Ls):
            Xr[rows[keep], :, C + j * V + emitted[keep, j]] = 1.0
        for j in range(Lr):
            Xr[:, j, C + Ls * V + j] = 1.0
        z, _ = head_forward(head_r, Xr.reshape(m * Lr, -1))
        r_tok, r_lp = kernels.sample_rows(z, np.full(m * Lr, tau), u_r.ravel())
        r_tok, r_lp = r_tok.reshape(m, Lr), r_lp.reshape(m, Lr)

        still = []
        for row, i in enumerate(active):
            action = tuple(int(x) for x in r_tok[row])
            res = envs[i].step(action)
            outcomes[i].append(res.outcome)
            if record:
                steps[i].append(
                    Step(
                        obs[i],
                        tuple(TokenEvent(int(emitted[row, k]), float(s_lp[row, k]), float(tau_s), STRATEGY) for k in range(Ls)),
                        tuple(TokenEvent(action[j], float(r_lp[row, j]), float(tau), REMAINDER) for j in range(Lr)),
                        action,
                        int(res.outcome),
                        step_refl[row],
                    )
                )
            obs[i] = res.observation
            if res.done:
                rewards[i] = res.reward
                final_fb[i] = res.observation.raw_feedback or ()
            else:
                still.append(i)
        active = np.array(still, dtype=np.int64)
        t += 1

    if not record:
        return RolloutSummary(rewards, outcomes)
    return [
        Trajectory(
            goals[i],
            tuple(steps[i]),
            rewards[i],
            int(seeds[i]),
            None if per_step_draw is not None else reflections[i],
            bool(dropouts[i]),
            tuple(final_fb[i]),
        )
        for i in range(n)
    ]


def collect_groups(
    policy: Policy,
    env: Env,
    goals: Sequence[Goal],
    K: int,
    tau: float,
    tau_s: float,
    buffers: Optional[Buffers],
    p_B: float,
    p_G: float,
    rng: np.random.Generator,
    update_index: int = 0,
    dropout_prob: float = 0.0,
    reflection_mode: str = EPISODE,
) -> list:
    """Collect ``K`` trajectories for each goal; push results into the buffers.

    Reads see the buffers as they were when the call started; pushes happen
    after every rollout finished, in trajectory order.
    """
    if K < 2:
        raise ValueError("group size K must be >= 2")
    all_goals = [g for g in goals for _ in range(K)]
    n = len(all_goals)
    use_reflection = buffers is not None and (p_B > 0 or p_G > 0)
    reflections = [None] * n
    per_step = None
    if use_reflection and reflection_mode == EPISODE:
        reflections = [draw_reflection(buffers, g.task_id, p_B, p_G, rng) for g in all_goals]
    elif use_reflection and reflection_mode == PER_STEP:
        cache = {}

        def per_step(i, t):
            if (i, t) not in cache:
                cache[(i, t)] = draw_reflection(buffers, all_goals[i].task_id, p_B, p_G, rng)
            return cache[(i, t)]
    elif use_reflection:
        raise ValueError(f"unknown reflection_mode {reflection_mode!r}")
    dropouts = rng.random(n) < dropout_prob if dropout_prob > 0 else np.zeros(n, dtype=bool)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    trajs = rollout(policy, env, all_goals, seeds, tau, tau_s, rng, reflections, dropouts, True, per_step)
    if buffers is not None:
        for traj in trajs:
            route(buffers, traj, update_index)
    return [Group(g, trajs[i * K : (i + 1) * K]) for i, g in enumerate(goals)]


def collect_group(policy, env, goal, K, tau, tau_s, buffers, p_B, p_G, rng, **kw) -> Group:
    return collect_groups(policy, env, [goal], K, tau, tau_s, buffers, p_B, p_G, rng, **kw)[0]


def strategy_diversity(group: Group) -> float:
    """Distinct per-episode strategy sequences divided by the group size."""
    return len({t.strategy_tokens() for t in group.trajectories}) / group.K


def vanilla_episode(policy: Policy, env: Env, goal: Goal, seed: int, tau: float,
                    rng: np.random.Generator) -> list:
    """Reference sampler: one token at a time at a single temperature, no reflection.

    Deliberately written without the batched engine; used as an oracle.
    Returns the per-step strategy token tuples.
    """
    layout = policy.layout
    e = env.clone()
    obs = e.reset(goal, seed)
    out = []
    for t in range(env.spec.horizon):
        ctx = policy.encoder.context(obs.features, None, t)
        emitted = []
        for seg, count in ((STRATEGY, layout.strategy_len), (REMAINDER, layout.remainder_len)):
            for _ in range(count):
                p = tempered_probs(logits(layout, policy.params, ctx, seg, emitted), tau)
                emitted.append(int(rng.choice(layout.vocab_size, p=p)))
        out.append(tuple(emitted[: layout.strategy_len]))
        res = e.step(emitted[layout.strategy_len :])
        obs = res.observation
        if res.done:
            break
    return out
