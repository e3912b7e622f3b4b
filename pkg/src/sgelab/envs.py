"""Environment contract and three synthetic sparse-reward POMDPs.

All three share one observation layout::

    [step one-hot (H)] [task x step one-hot (n_tasks * H)] [feedback block]

so the policy can address "which step" and "which step of which task"
linearly. Task ids are global: train tasks occupy ``[0, n_train)`` and test
tasks ``[n_train, n_train + n_test)``.
"""

from __future__ import annotations

import abc
from collections import namedtuple
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import TEST, TRAIN, EnvSpec, Goal, Observation

CONFIRMED, FAILED, UNKNOWN = 0, 1, 2

StepResult = namedtuple("StepResult", "observation reward done outcome")


class EnvError(Exception):
    pass


class UnknownTask(EnvError):
    pass


class EpisodeFinished(EnvError):
    pass


class MalformedAction(EnvError):
    pass


class NotReset(EnvError):
    pass


@dataclass(frozen=True)
class EnvState:
    task_id: int
    seed: int
    step: int
    outcomes: tuple
    hidden: tuple
    done: bool = False


@dataclass(frozen=True, eq=False)
class BasePrior:
    """What a capable-but-biased base model already "knows" about an env.

    ``favored`` holds one wrong strategy token per step that the base policy
    over-selects; ``remainder_table[s]`` is the remainder-token logit profile a
    base model produces after strategy token ``s``.
    """

    valid_strategies: int
    favored: tuple
    step_features: tuple
    task_step_features: np.ndarray
    knowledge: np.ndarray
    knowledge_strength: float
    remainder_table: np.ndarray


class Env(abc.ABC):
    """Single-episode, single-owner environment instance."""

    name: str = ""

    def __init__(self):
        self._state: Optional[EnvState] = None

    # -- static description -------------------------------------------------
    @property
    @abc.abstractmethod
    def spec(self) -> EnvSpec: ...

    @abc.abstractmethod
    def params(self) -> dict:
        """Constructor arguments (all integers) that rebuild this env."""

    def clone(self) -> "Env":
        return type(self)(**self.params())

    def tasks(self, split: str) -> list:
        spec = self.spec
        if split == TRAIN:
            return [Goal(i, TRAIN) for i in range(spec.n_train)]
        if split == TEST:
            return [Goal(spec.n_train + i, TEST) for i in range(spec.n_test)]
        raise ValueError(f"unknown split {split!r}")

    @abc.abstractmethod
    def base_prior(self) -> BasePrior: ...

    def step_verdicts(self, feedback: tuple, n_steps: int) -> tuple:
        """Per-step verdict (CONFIRMED/FAILED/UNKNOWN) implied by episode feedback."""
        return (UNKNOWN,) * n_steps

    # -- dynamics -----------------------------------------------------------
    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise NotReset("reset() has not been called")
        return self._state

    def _check_goal(self, goal: Goal) -> None:
        spec = self.spec
        lo, hi = (0, spec.n_train) if goal.split == TRAIN else (spec.n_train, spec.n_tasks)
        if not lo <= goal.task_id < hi:
            raise UnknownTask(f"task {goal.task_id} not in {goal.split} split")

    def _check_action(self, tokens) -> tuple:
        spec = self.spec
        try:
            tokens = tuple(int(t) for t in tokens)
        except (TypeError, ValueError) as exc:
            raise MalformedAction(str(exc)) from None
        if len(tokens) != spec.remainder_len:
            raise MalformedAction(f"expected {spec.remainder_len} tokens, got {len(tokens)}")
        if any(not 0 <= t < spec.vocab_size for t in tokens):
            raise MalformedAction("token out of range")
        return tokens

    def _base_features(self, task_id: int, step: int) -> np.ndarray:
        spec = self.spec
        f = np.zeros(spec.obs_dim)
        if step < spec.horizon:
            f[step] = 1.0
            f[spec.horizon + task_id * spec.horizon + step] = 1.0
        return f

    @property
    def _block(self) -> int:
        spec = self.spec
        return spec.horizon + spec.n_tasks * spec.horizon

    def _prior_indices(self):
        spec = self.spec
        step_features = tuple(range(spec.horizon))
        ts = spec.horizon + np.arange(spec.n_tasks)[:, None] * spec.horizon + np.arange(spec.horizon)[None, :]
        return step_features, ts

    @abc.abstractmethod
    def reset(self, goal: Goal, seed: int) -> Observation: ...

    @abc.abstractmethod
    def step(self, tokens) -> StepResult: ...

    @abc.abstractmethod
    def outcome_class(self, state: EnvState, tokens) -> int: ...


def _prefix_verdicts(feedback: tuple, n_steps: int) -> tuple:
    if not feedback:
        return (UNKNOWN,) * n_steps
    p = feedback[0]
    return tuple(CONFIRMED if t < p else FAILED if t == p else UNKNOWN for t in range(n_steps))


class CombinationLock(Env):
    """Hidden per-task combination over ``horizon`` steps.

    Each step emits a strategy token and ``remainder_len`` detail tokens; the
    step outcome is ``last_detail // n_details`` (``n_details`` details per
    outcome). Reward 1 iff the outcome sequence equals the combination.
    Terminal feedback is the length of the longest correct prefix.
    """

    name = "combination_lock"

    def __init__(
        self,
        horizon: int = 3,
        n_strategies: int = 8,
        n_details: int = 16,
        remainder_len: int = 1,
        n_train: int = 32,
        n_test: int = 16,
        n_easy: int = 1,
        detail_sharpness: int = 4,
        layout_seed: int = 0,
    ):
        super().__init__()
        if n_strategies < 2 or n_details < 1:
            raise ValueError("need >= 2 strategies and >= 1 detail")
        self.horizon = horizon
        self.n_strategies = n_strategies
        self.n_details = n_details
        self.remainder_len = remainder_len
        self.n_train = n_train
        self.n_test = n_test
        self.n_easy = n_easy
        self.detail_sharpness = detail_sharpness
        self.layout_seed = layout_seed
        self._spec = EnvSpec(
            self.name,
            vocab_size=n_strategies * n_details,
            strategy_len=1,
            remainder_len=remainder_len,
            horizon=horizon,
            obs_dim=horizon + (n_train + n_test) * horizon + horizon + 1,
            n_train=n_train,
            n_test=n_test,
        )
        self.favored, self.combos = self._layout()

    def _layout(self):
        rng = np.random.default_rng([self.layout_seed, 1])
        H, M = self.horizon, self.n_strategies
        favored = tuple(int(x) for x in rng.integers(0, M, size=H))
        combos = []
        for t in range(self.n_train + self.n_test):
            combos.append(
                tuple(int((favored[s] + 1 + rng.integers(0, M - 1)) % M) for s in range(H))
            )
        # easy tasks agree with the favored strategy on all steps but one
        for lo, hi in ((0, self.n_train), (self.n_train, self.n_train + self.n_test)):
            n = min(self.n_easy, hi - lo)
            for t in rng.choice(np.arange(lo, hi), size=n, replace=False):
                odd = int(rng.integers(0, H))
                combos[t] = tuple(combos[t][s] if s == odd else favored[s] for s in range(H))
        return favored, tuple(combos)

    @property
    def spec(self) -> EnvSpec:
        return self._spec

    def params(self) -> dict:
        return dict(
            horizon=self.horizon,
            n_strategies=self.n_strategies,
            n_details=self.n_details,
            remainder_len=self.remainder_len,
            n_train=self.n_train,
            n_test=self.n_test,
            n_easy=self.n_easy,
            detail_sharpness=self.detail_sharpness,
            layout_seed=self.layout_seed,
        )

    def easy_tasks(self) -> list:
        return [
            t
            for t, c in enumerate(self.combos)
            if sum(c[s] == self.favored[s] for s in range(self.horizon)) == self.horizon - 1
        ]

    def base_prior(self) -> BasePrior:
        V, D, M = self.spec.vocab_size, self.n_details, self.n_strategies
        table = np.zeros((M, V))
        for s in range(M):
            table[s, s * D : (s + 1) * D] = self.detail_sharpness
        step_features, ts = self._prior_indices()
        return BasePrior(
            valid_strategies=M,
            favored=self.favored,
            step_features=step_features,
            task_step_features=ts,
            knowledge=np.full((self.spec.n_tasks, self.horizon), -1),
            knowledge_strength=0.0,
            remainder_table=table,
        )

    def step_verdicts(self, feedback, n_steps):
        return _prefix_verdicts(feedback, n_steps)

    def outcome_class(self, state, tokens) -> int:
        tokens = self._check_action(tokens)
        return tokens[-1] // self.n_details

    def reset(self, goal, seed):
        self._check_goal(goal)
        self._state = EnvState(goal.task_id, int(seed), 0, (), self.combos[goal.task_id])
        return Observation(1, self._base_features(goal.task_id, 0))

    def step(self, tokens):
        st = self.state
        if st.done:
            raise EpisodeFinished("episode already finished")
        outcome = self.outcome_class(st, tokens)
        outcomes = st.outcomes + (outcome,)
        t = st.step + 1
        done = t >= self.horizon
        self._state = EnvState(st.task_id, st.seed, t, outcomes, st.hidden, done)
        if not done:
            return StepResult(Observation(t + 1, self._base_features(st.task_id, t)), 0.0, False, outcome)
        prefix = 0
        while prefix < self.horizon and outcomes[prefix] == st.hidden[prefix]:
            prefix += 1
        f = self._base_features(st.task_id, t)
        f[self._block + prefix] = 1.0
        reward = 1.0 if prefix == self.horizon else 0.0
        return StepResult(Observation(self.horizon, f, (prefix,)), reward, True, outcome)


class NoisyTap(Env):
    """Tap one of ``n_elements`` rectangles on a ``grid x grid`` screen per step.

    The remainder encodes a coordinate ``y * grid + x`` (last token); the
    outcome is the element containing it, or ``n_elements`` for background.
    """

    name = "noisy_tap"

    def __init__(
        self,
        grid: int = 12,
        n_elements: int = 6,
        horizon: int = 3,
        remainder_len: int = 1,
        n_train: int = 32,
        n_test: int = 16,
        tap_sharpness_milli: int = 500,
        hint_strength_milli: int = 2500,
        layout_seed: int = 0,
    ):
        super().__init__()
        self.grid = grid
        self.n_elements = n_elements
        self.horizon = horizon
        self.remainder_len = remainder_len
        self.n_train = n_train
        self.n_test = n_test
        self.tap_sharpness_milli = tap_sharpness_milli
        self.hint_strength_milli = hint_strength_milli
        self.layout_seed = layout_seed
        self._spec = EnvSpec(
            self.name,
            vocab_size=grid * grid,
            strategy_len=1,
            remainder_len=remainder_len,
            horizon=horizon,
            obs_dim=horizon + (n_train + n_test) * horizon + horizon + 1,
            n_train=n_train,
            n_test=n_test,
        )
        self.rects, self.favored, self.targets = self._layout()
        cell = np.full(grid * grid, n_elements, dtype=np.int64)
        for e, (x0, y0, w, h) in enumerate(self.rects):
            for y in range(y0, y0 + h):
                cell[y * grid + x0 : y * grid + x0 + w] = e
        self._cell = cell

    def _layout(self):
        rng = np.random.default_rng([self.layout_seed, 2])
        G = self.grid
        taken = np.zeros((G, G), dtype=bool)
        rects = []
        for _ in range(10_000):
            if len(rects) == self.n_elements:
                break
            w, h = (int(v) for v in rng.integers(2, 4, size=2))
            x0, y0 = int(rng.integers(0, G - w + 1)), int(rng.integers(0, G - h + 1))
            # one-cell margin so elements never touch
            ys, xs = slice(max(y0 - 1, 0), y0 + h + 1), slice(max(x0 - 1, 0), x0 + w + 1)
            if taken[ys, xs].any():
                continue
            taken[y0 : y0 + h, x0 : x0 + w] = True
            rects.append((x0, y0, w, h))
        if len(rects) < self.n_elements:
            raise ValueError("could not place all elements; enlarge the grid")
        E, H = self.n_elements, self.horizon
        favored = tuple(int(x) for x in rng.integers(0, E, size=H))
        targets = tuple(
            tuple(int((favored[s] + 1 + rng.integers(0, E - 1)) % E) for s in range(H))
            for _ in range(self.n_train + self.n_test)
        )
        return tuple(rects), favored, targets

    @property
    def spec(self) -> EnvSpec:
        return self._spec

    def params(self) -> dict:
        return dict(
            grid=self.grid,
            n_elements=self.n_elements,
            horizon=self.horizon,
            remainder_len=self.remainder_len,
            n_train=self.n_train,
            n_test=self.n_test,
            tap_sharpness_milli=self.tap_sharpness_milli,
            hint_strength_milli=self.hint_strength_milli,
            layout_seed=self.layout_seed,
        )

    def base_prior(self) -> BasePrior:
        G, E = self.grid, self.n_elements
        lam = self.tap_sharpness_milli / 1000.0
        ys, xs = np.divmod(np.arange(G * G), G)
        table = np.zeros((E, G * G))
        for e, (x0, y0, w, h) in enumerate(self.rects):
            cx, cy = x0 + (w - 1) / 2.0, y0 + (h - 1) / 2.0
            table[e] = -lam * ((xs - cx) ** 2 + (ys - cy) ** 2)
        step_features, ts = self._prior_indices()
        return BasePrior(
            valid_strategies=E,
            favored=self.favored,
            step_features=step_features,
            task_step_features=ts,
            knowledge=np.array(self.targets, dtype=np.int64),
            knowledge_strength=self.hint_strength_milli / 1000.0,
            remainder_table=table,
        )

    def step_verdicts(self, feedback, n_steps):
        return _prefix_verdicts(feedback, n_steps)

    def outcome_class(self, state, tokens) -> int:
        tokens = self._check_action(tokens)
        return int(self._cell[tokens[-1]])

    def reset(self, goal, seed):
        self._check_goal(goal)
        self._state = EnvState(goal.task_id, int(seed), 0, (), self.targets[goal.task_id])
        return Observation(1, self._base_features(goal.task_id, 0))

    def step(self, tokens):
        st = self.state
        if st.done:
            raise EpisodeFinished("episode already finished")
        outcome = self.outcome_class(st, tokens)
        outcomes = st.outcomes + (outcome,)
        t = st.step + 1
        done = t >= self.horizon
        self._state = EnvState(st.task_id, st.seed, t, outcomes, st.hidden, done)
        if not done:
            return StepResult(Observation(t + 1, self._base_features(st.task_id, t)), 0.0, False, outcome)
        first_wrong = 0
        while first_wrong < self.horizon and outcomes[first_wrong] == st.hidden[first_wrong]:
            first_wrong += 1
        f = self._base_features(st.task_id, t)
        f[self._block + first_wrong] = 1.0
        reward = 1.0 if first_wrong == self.horizon else 0.0
        return StepResult(Observation(self.horizon, f, (first_wrong,)), reward, True, outcome)


class FeedbackRepair(Env):
    """Guess a hidden bit string in two turns.

    Bits are ``token % 2``. A wrong first attempt reveals up to
    ``max_revealed`` wrong indices (lowest first); the second attempt must be
    exact. The outcome of an attempt is the bitmask of its revealed wrong
    indices, so attempts failing the same "tests" share an outcome.
    """

    name = "feedback_repair"

    def __init__(
        self,
        n_bits: int = 10,
        max_revealed: int = 4,
        vocab_size: int = 4,
        n_train: int = 32,
        n_test: int = 16,
        layout_seed: int = 0,
    ):
        super().__init__()
        if vocab_size < 2 or vocab_size % 2:
            raise ValueError("vocab_size must be even and >= 2")
        self.n_bits = n_bits
        self.max_revealed = max_revealed
        self.vocab_size = vocab_size
        self.n_train = n_train
        self.n_test = n_test
        self.layout_seed = layout_seed
        self.horizon = 2
        self._spec = EnvSpec(
            self.name,
            vocab_size=vocab_size,
            strategy_len=1,
            remainder_len=n_bits,
            horizon=2,
            obs_dim=2 + (n_train + n_test) * 2 + 1 + 2 * n_bits,
            n_train=n_train,
            n_test=n_test,
        )
        rng = np.random.default_rng([layout_seed, 3])
        self.targets = tuple(
            tuple(int(b) for b in rng.integers(0, 2, size=n_bits)) for _ in range(n_train + n_test)
        )

    @property
    def spec(self) -> EnvSpec:
        return self._spec

    def params(self) -> dict:
        return dict(
            n_bits=self.n_bits,
            max_revealed=self.max_revealed,
            vocab_size=self.vocab_size,
            n_train=self.n_train,
            n_test=self.n_test,
            layout_seed=self.layout_seed,
        )

    def base_prior(self) -> BasePrior:
        step_features, ts = self._prior_indices()
        return BasePrior(
            valid_strategies=self.vocab_size,
            favored=(),
            step_features=step_features,
            task_step_features=ts,
            knowledge=np.full((self.spec.n_tasks, 2), -1),
            knowledge_strength=0.0,
            remainder_table=np.zeros((self.vocab_size, self.vocab_size)),
        )

    def step_verdicts(self, feedback, n_steps):
        return (UNKNOWN,) * (n_steps - 1) + (FAILED,) if n_steps else ()

    def _revealed(self, target, bits) -> tuple:
        wrong = [i for i in range(self.n_bits) if bits[i] != target[i]]
        return tuple(wrong[: self.max_revealed])

    def outcome_class(self, state, tokens) -> int:
        tokens = self._check_action(tokens)
        bits = [t % 2 for t in tokens]
        return sum(1 << i for i in self._revealed(state.hidden, bits))

    def _features(self, task_id, turn, revealed, bits) -> np.ndarray:
        f = self._base_features(task_id, turn)
        blk = self._block
        if revealed is None:
            f[blk] = 1.0  # "no feedback yet" sentinel
        else:
            for i in revealed:
                f[blk + 1 + i] = 1.0
            f[blk + 1 + self.n_bits : blk + 1 + 2 * self.n_bits] = bits
        return f

    def reset(self, goal, seed):
        self._check_goal(goal)
        self._state = EnvState(goal.task_id, int(seed), 0, (), self.targets[goal.task_id])
        return Observation(1, self._features(goal.task_id, 0, None, None))

    def step(self, tokens):
        st = self.state
        if st.done:
            raise EpisodeFinished("episode already finished")
        tokens = self._check_action(tokens)
        bits = tuple(t % 2 for t in tokens)
        revealed = self._revealed(st.hidden, bits)
        outcome = sum(1 << i for i in revealed)
        exact = bits == st.hidden
        t = st.step + 1
        done = exact or t >= 2
        self._state = EnvState(st.task_id, st.seed, t, st.outcomes + (outcome,), st.hidden, done)
        obs = Observation(min(t + 1, 2), self._features(st.task_id, t, revealed, bits), revealed)
        return StepResult(obs, 1.0 if exact else 0.0, done, outcome)


ENVIRONMENTS = {cls.name: cls for cls in (CombinationLock, NoisyTap, FeedbackRepair)}


def make_env(name: str, **params) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}") from None
    return cls(**params)
