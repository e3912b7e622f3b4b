"""Group-relative policy optimization and the exploration baselines.

Methods: ``grpo`` and ``sge`` share the plain update; ``entropy_adv`` shapes
per-token advantages with the behavior entropy; ``rnd`` adds a novelty bonus
to zero-reward trajectories before advantages are computed; ``rlad`` adds a
KL penalty toward the initial parameters and drops the strategy inputs of
the remainder head for a fraction of trajectories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .core import Group, STRATEGY, REMAINDER
from .policy import (
    Policy,
    PolicyLayout,
    PolicyParams,
    head_backward,
    head_forward,
    remainder_input,
    strategy_input,
)

log = logging.getLogger(__name__)

METHODS = ("grpo", "sge", "entropy_adv", "rnd", "rlad")


class NonpositiveRatio(ValueError):
    pass


class NonFiniteLoss(RuntimeError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        self.diagnostics = diagnostics or {}
        super().__init__(f"{message}: {self.diagnostics}")


@dataclass(frozen=True)
class TrainerConfig:
    method: str = "sge"
    lr: float = 0.1
    K: int = 16
    clip_eps: float = 0.2
    epochs: int = 2
    tasks_per_update: int = 32
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.4
    kappa: float = 2.0
    rnd_dim: int = 16
    rnd_hidden: int = 32
    rnd_lr: float = 1e-3
    rnd_coef: float = 0.5
    kl_coeff: float = 0.001
    dropout_prob: float = 0.25

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.lr <= 0 or self.epochs < 1 or self.tasks_per_update < 1:
            raise ValueError("lr, epochs and tasks_per_update must be positive")


# -- advantages ---------------------------------------------------------------


def grpo_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards per group")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + 1e-6)


def group_rewards(group: Group) -> np.ndarray:
    return group.rewards()


def dynamic_filter(groups: Sequence[Group], rewards: Optional[Sequence] = None) -> list:
    """Drop groups whose rewards are all equal; survivors keep their order.

    ``rewards[i]`` overrides group ``i``'s terminal rewards (used when the
    rewards that drive advantages have been augmented).
    """
    out = []
    for i, g in enumerate(groups):
        r = np.asarray(rewards[i] if rewards is not None else g.rewards())
        if not np.all(r == r[0]):
            out.append(g)
    return out


def ppo_clip_objective(ratios, advantages, eps: float):
    """Return ``(loss, dloss_dratio)`` for the token-mean clipped surrogate."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if np.any(ratios <= 0):
        raise NonpositiveRatio("importance ratios must be positive")
    terms, coef, _ = kernels.clip_surrogate(ratios, np.asarray(advantages, dtype=np.float64), eps)
    n = ratios.size
    return -float(terms.sum() / n), -coef / n


def entropy_adv_shape(A, H, alpha: float = 0.4, kappa: float = 2.0):
    """``A + min(alpha * H, |A| / kappa)``; ``H`` is treated as a constant."""
    A = np.asarray(A, dtype=np.float64)
    H = np.asarray(H, dtype=np.float64)
    if np.any(H < 0):
        raise ValueError("entropy must be non-negative")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    out = A + np.minimum(alpha * H, np.abs(A) / kappa)
    return float(out) if out.ndim == 0 else out


# -- random network distillation ----------------------------------------------------


class RunningStd:
    """Welford accumulator of the population standard deviation."""

    def __init__(self):
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, values) -> None:
        for v in np.asarray(values, dtype=np.float64).ravel():
            self.count += 1
            d = v - self.mean
            self.mean += d / self.count
            self.m2 += d * (v - self.mean)

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.count)) if self.count else 0.0


def _mlp_init(rng, n_in, hidden, d):
    return {
        "W1": rng.normal(0.0, 1.0, (hidden, n_in)),
        "b1": rng.normal(0.0, 0.1, hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), (d, hidden)),
        "b2": np.zeros(d),
    }


def _mlp(net, X):
    h = np.tanh(X @ net["W1"].T + net["b1"])
    return h @ net["W2"].T + net["b2"], h


class RndPair:
    """Frozen random target network and a trainable predictor (two tanh layers each)."""

    def __init__(self, n_in: int, d: int = 16, hidden: int = 32, seed: int = 0):
        rng = np.random.default_rng([seed, 0x52AD])
        self.target = _mlp_init(rng, n_in, hidden, d)
        self.predictor = _mlp_init(rng, n_in, hidden, d)
        for a in self.target.values():
            a.setflags(write=False)
        self.stats = RunningStd()
        self.n_in = n_in

    def errors(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y, _ = _mlp(self.target, X)
        p, _ = _mlp(self.predictor, X)
        return ((p - y) ** 2).sum(axis=1)

    def rewards(self, X) -> np.ndarray:
        e = self.errors(X)
        std = self.stats.std
        if self.stats.count < 2 or std == 0.0:
            return np.zeros_like(e)
        return e / std

    def update(self, X, lr: float) -> "RndPair":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y, _ = _mlp(self.target, X)
        p, h = _mlp(self.predictor, X)
        diff = p - y
        self.stats.update((diff**2).sum(axis=1))
        n = X.shape[0]
        gp = 2.0 * diff / n  # d mean(error) / d p
        net = self.predictor
        dh = (gp @ net["W2"]) * (1.0 - h * h)
        net["W2"] -= lr * (gp.T @ h)
        net["b2"] -= lr * gp.sum(axis=0)
        net["W1"] -= lr * (dh.T @ X)
        net["b1"] -= lr * dh.sum(axis=0)
        return self


def rnd_reward(pair: RndPair, encoding) -> float:
    return float(pair.rewards(encoding)[0])


def rnd_update(pair: RndPair, batch, lr: float = 1e-3) -> RndPair:
    return pair.update(batch, lr)


def rnd_encoding(policy: Policy, traj) -> np.ndarray:
    """Per-step encodings: last remainder-head input ++ one-hot action tokens."""
    layout, enc = policy.layout, policy.encoder
    V = layout.vocab_size
    rows = []
    for t, step in enumerate(traj.steps):
        ctx = enc.context(step.observation.features, step.reflection, t)
        strat = [e.token for e in step.strategy]
        x = remainder_input(layout, ctx, strat, layout.remainder_len - 1)
        act = np.zeros(V * layout.remainder_len)
        for j, tok in enumerate(step.action):
            act[j * V + tok] = 1.0
        rows.append(np.concatenate([x, act]))
    return np.stack(rows)


def rnd_input_dim(layout: PolicyLayout) -> int:
    return layout.rem_in + layout.vocab_size * layout.remainder_len


# -- token batches -------------------------------------------------------------------


@dataclass
class TokenBatch:
    """Every scored token of a batch of trajectories, split by head."""

    X: dict  # segment -> (N, n_in) inputs
    tokens: dict
    temps: dict
    old_lp: dict
    adv: dict
    traj: dict  # segment -> trajectory index per token
    n_traj: int
    dropout: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def n_tokens(self) -> int:
        return sum(len(v) for v in self.tokens.values())


def build_batch(policy: Policy, trajectories: Sequence, advantages: Sequence[float]) -> TokenBatch:
    """Rebuild the exact inputs each token was sampled from.

    Uses the step's recorded reflection, the trajectory's dropout flag and
    each token's recorded temperature.
    """
    layout, enc = policy.layout, policy.encoder
    rows = {STRATEGY: [], REMAINDER: []}
    for i, (traj, a) in enumerate(zip(trajectories, advantages)):
        for t, step in enumerate(traj.steps):
            ctx = enc.context(step.observation.features, step.reflection, t)
            emitted = []
            for ev in step.strategy:
                rows[STRATEGY].append((strategy_input(layout, ctx, emitted), ev, a, i))
                emitted.append(ev.token)
            for j, ev in enumerate(step.remainder):
                x = remainder_input(layout, ctx, emitted, j, traj.strategy_dropout)
                rows[REMAINDER].append((x, ev, a, i))
    out = {k: {} for k in ("X", "tokens", "temps", "old_lp", "adv", "traj")}
    for seg, rs in rows.items():
        width = layout.strat_in if seg == STRATEGY else layout.rem_in
        out["X"][seg] = np.stack([r[0] for r in rs]) if rs else np.zeros((0, width))
        out["tokens"][seg] = np.array([r[1].token for r in rs], dtype=np.int64)
        out["temps"][seg] = np.array([r[1].temperature for r in rs])
        out["old_lp"][seg] = np.array([r[1].logprob for r in rs])
        out["adv"][seg] = np.array([r[2] for r in rs], dtype=np.float64)
        out["traj"][seg] = np.array([r[3] for r in rs], dtype=np.int64)
    dropout = np.array([t.strategy_dropout for t in trajectories], dtype=bool)
    return TokenBatch(n_traj=len(trajectories), dropout=dropout, **out)


def _segment_pass(params: PolicyParams, batch: TokenBatch, seg: str):
    head = params.head(seg)
    z, hid = head_forward(head, batch.X[seg])
    lp_all = kernels.log_softmax_rows(z, batch.temps[seg])
    return head, z, hid, lp_all


def shape_entropy_advantages(policy: Policy, batch: TokenBatch, alpha: float, kappa: float) -> None:
    """Replace token advantages with entropy-shaped ones, entropy taken from the current (behavior) params."""
    for seg in (STRATEGY, REMAINDER):
        if not len(batch.tokens[seg]):
            continue
        z, _ = head_forward(policy.params.head(seg), batch.X[seg])
        H = kernels.entropy_rows(z, batch.temps[seg])
        batch.adv[seg] = entropy_adv_shape(batch.adv[seg], H, alpha, kappa)


def batch_loss(params: PolicyParams, batch: TokenBatch, eps: float, kl_coeff: float = 0.0,
               ref_params: Optional[PolicyParams] = None, want_grad: bool = True):
    """Token-mean clipped surrogate plus an optional KL penalty toward ``ref_params``.

    Returns ``(loss, grad, info)``; ``grad`` is None when ``want_grad`` is false.
    """
    N = batch.n_tokens
    grad = params.zeros_like() if want_grad else None
    loss = 0.0
    kl_total = 0.0
    ratio_sum = ent_sum = clip_sum = 0.0
    for seg, prefix in ((STRATEGY, "s"), (REMAINDER, "r")):
        toks = batch.tokens[seg]
        n = len(toks)
        if not n:
            continue
        temps = batch.temps[seg]
        head, z, hid, lp_all = _segment_pass(params, batch, seg)
        rows = np.arange(n)
        new_lp = lp_all[rows, toks]
        ratio = np.exp(new_lp - batch.old_lp[seg])
        terms, coef, clipped = kernels.clip_surrogate(ratio, batch.adv[seg], eps)
        loss -= terms.sum() / N
        p = np.exp(lp_all)
        ratio_sum += ratio.sum()
        ent_sum += kernels.entropy_rows(z, temps).sum()
        clip_sum += clipped.sum()
        G = None
        if want_grad:
            # d(-term/N)/d new_lp = -coef * ratio / N ; d lp / d z = (onehot - p) / tau
            dl = -coef * ratio / N
            G = -p * dl[:, None]
            G[rows, toks] += dl
            G /= temps[:, None]
        if kl_coeff and ref_params is not None:
            zq, _ = head_forward(ref_params.head(seg), batch.X[seg])
            lq = kernels.log_softmax_rows(zq, temps)
            diff = lp_all - lq
            kl = (p * diff).sum(axis=1)
            kl_total += kl.sum()
            if want_grad:
                G += (kl_coeff / N) * p * (diff - kl[:, None]) / temps[:, None]
        if want_grad:
            for k, g in head_backward(head, batch.X[seg], hid, G).items():
                grad.arrays[f"{prefix}.{k}"] += g
    kl_pen = kl_coeff * kl_total / N if N else 0.0
    loss += kl_pen
    info = {
        "mean_ratio": ratio_sum / N if N else 1.0,
        "mean_entropy": ent_sum / N if N else 0.0,
        "clip_fraction": clip_sum / N if N else 0.0,
        "kl_penalty": kl_pen,
        "n_tokens": N,
    }
    return float(loss), grad, info


def rlad_terms(params: PolicyParams, ref_params: PolicyParams, batch: TokenBatch, kl_coeff: float,
               dropout_prob: float, rng: np.random.Generator):
    """KL penalty of ``batch`` toward ``ref_params`` and a fresh per-trajectory dropout mask."""
    if not 0.0 <= dropout_prob <= 1.0:
        raise ValueError("dropout_prob must lie in [0, 1]")
    N = batch.n_tokens
    total = 0.0
    for seg in (STRATEGY, REMAINDER):
        if not len(batch.tokens[seg]):
            continue
        temps = batch.temps[seg]
        zp, _ = head_forward(params.head(seg), batch.X[seg])
        zq, _ = head_forward(ref_params.head(seg), batch.X[seg])
        lp = kernels.log_softmax_rows(zp, temps)
        lq = kernels.log_softmax_rows(zq, temps)
        total += (np.exp(lp) * (lp - lq)).sum()
    mask = rng.random(batch.n_traj) < dropout_prob
    return (kl_coeff * total / N if N else 0.0), mask


# -- optimizer and trainer -------------------------------------------------------------


class Adam:
    def __init__(self, params: PolicyParams, lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def step(self, params: PolicyParams, grad: PolicyParams) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in params.names():
            g = grad.arrays[name]
            m = self.m.arrays[name]
            v = self.v.arrays[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params.arrays[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class Trainer:
    """Holds the live policy, optimizer state and method-specific state."""

    def __init__(self, policy: Policy, config: TrainerConfig, seed: int = 0):
        self.policy = policy
        self.config = config
        self.optimizer = Adam(policy.params, config.lr, config.adam_b1, config.adam_b2, config.adam_eps)
        self.ref_params = policy.params.copy() if config.method == "rlad" else None
        self.rnd = (
            RndPair(rnd_input_dim(policy.layout), config.rnd_dim, config.rnd_hidden, seed)
            if config.method == "rnd"
            else None
        )
        self.updates = 0

    @property
    def params(self) -> PolicyParams:
        return self.policy.params

    def training_rewards(self, groups: Sequence[Group]) -> list:
        """Per-group rewards that drive advantages (RND adds its bonus to failures)."""
        rewards = [g.rewards() for g in groups]
        if self.rnd is None:
            return rewards
        encs = [[rnd_encoding(self.policy, t) for t in g.trajectories] for g in groups]
        out = []
        for g, r, es in zip(groups, rewards, encs):
            bonus = np.array([self.rnd.rewards(e).mean() for e in es])
            out.append(np.where(r == 0.0, r + self.config.rnd_coef * bonus, r))
        all_enc = np.concatenate([e for es in encs for e in es])
        self.rnd.update(all_enc, self.config.rnd_lr)
        return out

    def prepare(self, groups: Sequence[Group]) -> list:
        """Attach advantages and apply dynamic sampling."""
        rewards = self.training_rewards(groups)
        kept = dynamic_filter(groups, rewards)
        kept_r = [r for g, r in zip(groups, rewards) if any(g is k for k in kept)]
        return [Group(g.goal, g.trajectories, tuple(grpo_advantages(r))) for g, r in zip(kept, kept_r)]

    def make_batch(self, groups: Sequence[Group]) -> TokenBatch:
        trajs = [t for g in groups for t in g.trajectories]
        advs = [a for g in groups for a in g.advantages]
        batch = build_batch(self.policy, trajs, advs)
        if self.config.method == "entropy_adv":
            shape_entropy_advantages(self.policy, batch, self.config.alpha, self.config.kappa)
        return batch

    def loss(self, batch: TokenBatch, params: Optional[PolicyParams] = None, want_grad: bool = True):
        kl = self.config.kl_coeff if self.config.method == "rlad" else 0.0
        return batch_loss(params or self.params, batch, self.config.clip_eps, kl, self.ref_params, want_grad)


def update_step(trainer: Trainer, groups: Sequence[Group]):
    """E epochs of clipped-surrogate Adam steps on groups that already carry advantages.

    Returns ``(params, stats)``; stats are measured on the first epoch.
    """
    cfg = trainer.config
    if not groups:
        log.info("update %d skipped: no group with reward variance", trainer.updates)
        trainer.updates += 1
        return trainer.params, {"loss": 0.0, "mean_ratio": 1.0, "mean_entropy": 0.0, "clip_fraction": 0.0,
                                "n_groups": 0, "n_tokens": 0, "skipped": True}
    batch = trainer.make_batch(groups)
    stats = None
    for epoch in range(cfg.epochs):
        loss, grad, info = trainer.loss(batch)
        if not np.isfinite(loss) or not all(np.isfinite(a).all() for a in grad.arrays.values()):
            raise NonFiniteLoss(
                f"non-finite loss at update {trainer.updates}",
                {"update": trainer.updates, "epoch": epoch, "loss": loss, **info},
            )
        if stats is None:
            stats = {"loss": loss, **info, "n_groups": len(groups), "skipped": False}
        trainer.optimizer.step(trainer.params, grad)
    if not trainer.params.all_finite():
        raise NonFiniteLoss(f"non-finite parameters after update {trainer.updates}", {"update": trainer.updates})
    trainer.updates += 1
    return trainer.params, stats
