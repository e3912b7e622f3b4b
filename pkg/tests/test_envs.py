import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgelab.core import TEST, TRAIN, Goal
from sgelab.envs import (
    CONFIRMED,
    FAILED,
    UNKNOWN,
    CombinationLock,
    EpisodeFinished,
    FeedbackRepair,
    MalformedAction,
    NoisyTap,
    NotReset,
    UnknownTask,
    make_env,
)

ALL_ENVS = ["combination_lock", "noisy_tap", "feedback_repair"]


def _play(env, task_id, seed, actions):
    obs = env.reset(Goal(task_id), seed)
    out = [(obs.step_index, obs.features.tobytes(), obs.raw_feedback)]
    for a in actions:
        res = env.step(a)
        o = res.observation
        out.append((o.step_index, o.features.tobytes(), o.raw_feedback, res.reward, res.done, res.outcome))
        if res.done:
            break
    return out


def _random_actions(env, rng, n):
    s = env.spec
    return [tuple(int(x) for x in rng.integers(0, s.vocab_size, s.remainder_len)) for _ in range(n)]


@pytest.mark.parametrize("name", ALL_ENVS)
def test_reset_is_deterministic(name):
    env = make_env(name)
    a = env.reset(Goal(0), 7)
    b = make_env(name).reset(Goal(0), 7)
    assert a == b


@pytest.mark.parametrize("name", ALL_ENVS)
def test_full_sequence_is_deterministic(name):
    rng = np.random.default_rng(3)
    for _ in range(20):
        env = make_env(name)
        task = int(rng.integers(env.spec.n_train))
        seed = int(rng.integers(1000))
        actions = _random_actions(env, rng, env.spec.horizon)
        assert _play(env, task, seed, actions) == _play(make_env(name), task, seed, actions)


def test_noisy_tap_first_observation(tap):
    assert tap.reset(Goal(0), 1).step_index == 1


def test_feedback_repair_fresh_sentinel(repair):
    obs = repair.reset(Goal(3), 5)
    blk = repair.spec.horizon + repair.spec.n_tasks * repair.spec.horizon
    assert obs.features[blk] == 1.0
    assert not obs.features[blk + 1 :].any()
    # the sentinel disappears once feedback exists
    res = repair.step([1 - b for b in repair.targets[3]])
    assert res.observation.features[blk] == 0.0


@pytest.mark.parametrize("name", ALL_ENVS)
def test_unknown_task(name):
    env = make_env(name)
    s = env.spec
    with pytest.raises(UnknownTask):
        env.reset(Goal(s.n_train, TRAIN), 0)
    with pytest.raises(UnknownTask):
        env.reset(Goal(0, TEST), 0)


@pytest.mark.parametrize("name", ALL_ENVS)
def test_step_errors(name):
    env = make_env(name)
    s = env.spec
    with pytest.raises(NotReset):
        env.step([0] * s.remainder_len)
    env.reset(Goal(0), 0)
    with pytest.raises(MalformedAction):
        env.step([0] * (s.remainder_len + 1))
    with pytest.raises(MalformedAction):
        env.step([s.vocab_size] * s.remainder_len)
    res = None
    for _ in range(s.horizon):
        res = env.step([0] * s.remainder_len)
        if res.done:
            break
    assert res.done
    with pytest.raises(EpisodeFinished):
        env.step([0] * s.remainder_len)


def test_lock_first_outcome_gives_prefix(lock):
    """Brute force the detail -> outcome map and play the combination's first outcome."""
    combo = lock.combos[0]
    lock.reset(Goal(0), 0)
    good = [v for v in range(lock.spec.vocab_size) if lock.outcome_class(lock.state, (v,)) == combo[0]]
    assert len(good) == lock.n_details
    for v in good:
        lock.reset(Goal(0), 0)
        res = lock.step((v,))
        for _ in range(lock.horizon - 1):
            res = lock.step((0,))
        assert res.done and res.observation.raw_feedback[0] >= 1


def test_lock_solution_rewarded(lock):
    for task in (0, 5, lock.n_train):
        split = TRAIN if task < lock.n_train else TEST
        lock.reset(Goal(task, split), 1)
        rewards = []
        for s, c in enumerate(lock.combos[task]):
            res = lock.step((c * lock.n_details + 3,))
            rewards.append(res.reward)
        assert rewards == [0.0] * (lock.horizon - 1) + [1.0]
        assert res.observation.raw_feedback == (lock.horizon,)


def test_lock_strategy_details_collapse(lock):
    lock.reset(Goal(0), 0)
    for k in range(lock.n_strategies):
        classes = {lock.outcome_class(lock.state, (k * lock.n_details + d,)) for d in range(lock.n_details)}
        assert classes == {k}


def test_tap_same_rectangle_same_outcome(tap):
    tap.reset(Goal(0), 0)
    x0, y0, w, h = tap.rects[0]
    a = y0 * tap.grid + x0
    b = (y0 + h - 1) * tap.grid + x0 + w - 1
    assert a != b
    assert tap.outcome_class(tap.state, (a,)) == tap.outcome_class(tap.state, (b,)) == 0


def test_tap_background(tap):
    tap.reset(Goal(0), 0)
    inside = set()
    for x0, y0, w, h in tap.rects:
        inside |= {y * tap.grid + x for y in range(y0, y0 + h) for x in range(x0, x0 + w)}
    bg = next(v for v in range(tap.grid**2) if v not in inside)
    assert tap.outcome_class(tap.state, (bg,)) == tap.n_elements


def test_repair_exact_first_turn(repair):
    repair.reset(Goal(2), 0)
    res = repair.step(repair.targets[2])
    assert res.done and res.reward == 1.0 and res.outcome == 0


def test_repair_same_wrong_set_same_outcome(repair):
    repair.reset(Goal(0), 0)
    target = repair.targets[0]
    a = [t + 2 for t in target]  # same bits, different tokens
    a[0] = 1 - target[0]
    b = list(target)
    b[0] = 1 - target[0]
    assert a != b
    assert repair.outcome_class(repair.state, a) == repair.outcome_class(repair.state, b) == 1


def test_repair_reveals_at_most_four(repair):
    repair.reset(Goal(0), 0)
    res = repair.step([1 - b for b in repair.targets[0]])
    assert not res.done and res.reward == 0.0
    assert res.observation.raw_feedback == (0, 1, 2, 3)
    res = repair.step(repair.targets[0])
    assert res.done and res.reward == 1.0


@pytest.mark.parametrize("name", ALL_ENVS)
def test_collapse_by_enumeration(name):
    """At default sizes every env has two distinct actions with one OutcomeId."""
    env = make_env(name)
    env.reset(Goal(0), 0)
    s = env.spec
    if s.remainder_len == 1:
        actions = [(v,) for v in range(s.vocab_size)]
    else:
        rng = np.random.default_rng(0)
        actions = [tuple(int(x) for x in rng.integers(0, s.vocab_size, s.remainder_len)) for _ in range(500)]
    seen = {}
    for a in actions:
        seen.setdefault(env.outcome_class(env.state, a), set()).add(a)
    assert max(len(v) for v in seen.values()) >= 2


@pytest.mark.parametrize("name", ALL_ENVS)
def test_outcome_class_is_pure(name):
    env = make_env(name)
    env.reset(Goal(1), 4)
    rng = np.random.default_rng(5)
    for a in _random_actions(env, rng, 50):
        first = env.outcome_class(env.state, a)
        assert all(env.outcome_class(env.state, a) == first for _ in range(3))


@pytest.mark.parametrize("name", ALL_ENVS)
def test_sparsity(name):
    env = make_env(name)
    rng = np.random.default_rng(11)
    for ep in range(100):
        env.reset(Goal(ep % env.spec.n_train), ep)
        for a in _random_actions(env, rng, env.spec.horizon):
            res = env.step(a)
            if not res.done:
                assert res.reward == 0.0
            else:
                break


def test_default_task_counts(lock):
    assert len(lock.tasks(TRAIN)) == 32
    assert len(lock.tasks(TEST)) == 16


@pytest.mark.parametrize("name", ALL_ENVS)
def test_splits_disjoint_and_stable(name):
    env = make_env(name)
    train = {g.task_id for g in env.tasks(TRAIN)}
    test = {g.task_id for g in env.tasks(TEST)}
    assert not train & test
    assert env.tasks(TRAIN) == make_env(name).tasks(TRAIN)
    assert env.tasks(TEST) == make_env(name).tasks(TEST)


def test_combinations_avoid_favored_except_easy(lock):
    easy = set(lock.easy_tasks())
    assert len(easy) == 2  # one per split
    for t, combo in enumerate(lock.combos):
        if t not in easy:
            assert all(c != f for c, f in zip(combo, lock.favored))


def test_prefix_verdicts(lock):
    assert lock.step_verdicts((1,), 3) == (CONFIRMED, FAILED, UNKNOWN)
    assert lock.step_verdicts((), 2) == (UNKNOWN, UNKNOWN)


@given(st.integers(2, 5), st.integers(2, 6), st.integers(1, 4), st.integers(0, 50))
def test_lock_spec_properties(horizon, strategies, details, layout_seed):
    env = CombinationLock(horizon=horizon, n_strategies=strategies, n_details=details,
                          n_train=4, n_test=2, layout_seed=layout_seed)
    s = env.spec
    assert s.vocab_size == strategies * details
    assert all(0 <= c < strategies for combo in env.combos for c in combo)
    assert env.clone().combos == env.combos
    assert env.clone().params() == env.params()


def test_env_rejects_bad_params():
    with pytest.raises(ValueError):
        CombinationLock(n_strategies=1)
    with pytest.raises(ValueError):
        FeedbackRepair(vocab_size=3)
    with pytest.raises(ValueError):
        NoisyTap(grid=3, n_elements=6)
    with pytest.raises(ValueError):
        make_env("nope")


def test_tap_enumeration_of_outcomes(tap):
    tap.reset(Goal(0), 0)
    classes = {tap.outcome_class(tap.state, (v,)) for v in range(tap.grid**2)}
    assert classes == set(range(tap.n_elements + 1))
    # elements never overlap: each rectangle's cells map to exactly its index
    for e, (x0, y0, w, h) in enumerate(tap.rects):
        cells = [(y * tap.grid + x,) for y, x in itertools.product(range(y0, y0 + h), range(x0, x0 + w))]
        assert {tap.outcome_class(tap.state, c) for c in cells} == {e}
