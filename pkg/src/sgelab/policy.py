"""Hierarchical autoregressive categorical policy over integer tokens.

Two heads share one context vector:

* the strategy head scores strategy token ``k`` of a step from
  ``context ++ one_hot(strategy tokens emitted so far) ++ one_hot(k)``;
* the remainder head scores remainder token ``j`` from
  ``context ++ one_hot(all strategy tokens of the step) ++ one_hot(j)``.

Each head is ``W x + b`` plus, optionally, a residual ``U tanh(Z x + c)``
branch. Every probability is ``softmax(logits / temperature)`` with the
temperature stored on the token, so scoring reproduces sampling exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .core import POSITIVE, REMAINDER, STRATEGY, ReflectionContext, TokenEvent
from .envs import CONFIRMED, FAILED, Env

_MAGIC = b"SGEPOL01"


class DimensionMismatch(ValueError):
    pass


class NonpositiveTemperature(ValueError):
    pass


@dataclass(frozen=True)
class PolicyLayout:
    vocab_size: int
    strategy_len: int
    remainder_len: int
    obs_dim: int
    hidden: int = 0

    @property
    def refl_offset(self) -> int:
        return self.obs_dim

    @property
    def ctx_dim(self) -> int:
        # obs ++ [neg-confirmed | neg-failed | neg-unknown | positive] token blocks ++ (pos, neg) flags
        return self.obs_dim + 4 * self.vocab_size + 2

    @property
    def strat_in(self) -> int:
        return self.ctx_dim + self.strategy_len * self.vocab_size + self.strategy_len

    @property
    def rem_in(self) -> int:
        return self.ctx_dim + self.strategy_len * self.vocab_size + self.remainder_len

    @classmethod
    def for_env(cls, env: Env, hidden: int = 0) -> "PolicyLayout":
        s = env.spec
        return cls(s.vocab_size, s.strategy_len, s.remainder_len, s.obs_dim, hidden)


_HEAD_KEYS = ("W", "b", "Z", "c", "U")


class PolicyParams:
    """Named float64 arrays for both heads (``s.*`` strategy, ``r.*`` remainder)."""

    def __init__(self, arrays: dict, seed: int = 0):
        self.arrays = arrays
        self.seed = seed

    @classmethod
    def zeros(cls, layout: PolicyLayout, seed: int = 0) -> "PolicyParams":
        V, h = layout.vocab_size, layout.hidden
        arrays = {}
        for prefix, n_in in (("s", layout.strat_in), ("r", layout.rem_in)):
            arrays[f"{prefix}.W"] = np.zeros((V, n_in))
            arrays[f"{prefix}.b"] = np.zeros(V)
            if h:
                arrays[f"{prefix}.Z"] = np.zeros((h, n_in))
                arrays[f"{prefix}.c"] = np.zeros(h)
                arrays[f"{prefix}.U"] = np.zeros((V, h))
        return cls(arrays, seed)

    def names(self) -> list:
        return [f"{p}.{k}" for p in ("s", "r") for k in _HEAD_KEYS if f"{p}.{k}" in self.arrays]

    def __getitem__(self, name):
        return self.arrays[name]

    def head(self, segment: str) -> dict:
        p = "s" if segment == STRATEGY else "r"
        return {k: self.arrays[f"{p}.{k}"] for k in _HEAD_KEYS if f"{p}.{k}" in self.arrays}

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()}, self.seed)

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams({k: np.zeros_like(v) for k, v in self.arrays.items()}, self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].ravel() for n in self.names()])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for n in self.names():
            a = self.arrays[n]
            a[...] = vec[i : i + a.size].reshape(a.shape)
            i += a.size
        if i != len(vec):
            raise DimensionMismatch("flat vector length does not match parameters")

    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays.values())


@dataclass(frozen=True)
class PolicyConfig:
    """Base-policy construction knobs.

    ``beta`` is the logit gap toward each step's favored wrong strategy; the
    ``reflect_*`` values are how strongly the base model follows a reflection
    context (keep confirmed strategies, avoid the failed one, loosely avoid
    unverified ones, reuse successful ones).
    """

    beta: float = 3.0
    junk_penalty: float = -12.0
    reflect_keep: float = 6.0
    reflect_avoid: float = -6.0
    reflect_unknown: float = -1.0
    reflect_positive: float = 4.0
    hidden: int = 0
    init_seed: int = 0
    init_scale: float = 0.02


@dataclass
class Policy:
    layout: PolicyLayout
    params: PolicyParams
    encoder: "ContextEncoder"
    config: PolicyConfig = field(default_factory=PolicyConfig)


class ContextEncoder:
    """Builds the context vector: observation ++ reflection slice ++ polarity flags.

    The reflection slice is aligned to the current step: it holds counts of
    the reflected record's strategy tokens *at this step*, routed to a block by
    polarity and, for negative records, by the verdict the episode feedback
    implies for this step.
    """

    def __init__(self, layout: PolicyLayout, env: Env):
        self.layout = layout
        self.env = env

    def reflection_slice(self, reflection: Optional[ReflectionContext], step: int) -> np.ndarray:
        V = self.layout.vocab_size
        out = np.zeros(4 * V + 2)
        if reflection is None:
            return out
        rec = reflection.record
        if reflection.polarity == POSITIVE:
            block = 3
            out[4 * V] = 1.0
        else:
            out[4 * V + 1] = 1.0
            verdicts = self.env.step_verdicts(rec.feedback, len(rec.strategies))
            block = None
            if step < len(verdicts):
                block = 0 if verdicts[step] == CONFIRMED else 1 if verdicts[step] == FAILED else 2
        if block is not None and step < len(rec.strategies):
            for tok in rec.strategies[step]:
                out[block * V + tok] += 1.0
        return out

    def context(self, features, reflection: Optional[ReflectionContext], step: int) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape != (self.layout.obs_dim,):
            raise DimensionMismatch(f"features have shape {features.shape}, want ({self.layout.obs_dim},)")
        return np.concatenate([features, self.reflection_slice(reflection, step)])


# -- head inputs ---------------------------------------------------------------


def strategy_input(layout: PolicyLayout, context, emitted: Sequence[int]) -> np.ndarray:
    V, Ls = layout.vocab_size, layout.strategy_len
    k = len(emitted)
    if k >= Ls:
        raise DimensionMismatch("strategy segment already complete")
    x = np.zeros(layout.strat_in)
    x[: layout.ctx_dim] = context
    for i, tok in enumerate(emitted):
        x[layout.ctx_dim + i * V + tok] = 1.0
    x[layout.ctx_dim + Ls * V + k] = 1.0
    return x


def remainder_input(layout: PolicyLayout, context, strategy_tokens: Sequence[int], position: int,
                    dropout: bool = False) -> np.ndarray:
    V, Ls = layout.vocab_size, layout.strategy_len
    if not 0 <= position < layout.remainder_len:
        raise DimensionMismatch("remainder position out of range")
    x = np.zeros(layout.rem_in)
    x[: layout.ctx_dim] = context
    if not dropout:
        for i, tok in enumerate(strategy_tokens):
            x[layout.ctx_dim + i * V + tok] = 1.0
    x[layout.ctx_dim + Ls * V + position] = 1.0
    return x


def head_forward(head: dict, X: np.ndarray):
    """Logits for a batch of inputs; also returns the hidden activations (or None)."""
    X = np.atleast_2d(X)
    if X.shape[1] != head["W"].shape[1]:
        raise DimensionMismatch(f"input width {X.shape[1]} != {head['W'].shape[1]}")
    out = X @ head["W"].T + head["b"]
    hid = None
    if "Z" in head:
        hid = np.tanh(X @ head["Z"].T + head["c"])
        out = out + hid @ head["U"].T
    return out, hid


def head_backward(head: dict, X: np.ndarray, hid, G: np.ndarray) -> dict:
    """Parameter gradients of ``sum(G * logits)``."""
    grads = {"W": G.T @ X, "b": G.sum(axis=0)}
    if hid is not None:
        grads["U"] = G.T @ hid
        dpre = (G @ head["U"]) * (1.0 - hid * hid)
        grads["Z"] = dpre.T @ X
        grads["c"] = dpre.sum(axis=0)
    return grads


def _input_for(layout, context, segment, emitted):
    if segment == STRATEGY:
        return strategy_input(layout, context, emitted)
    Ls = layout.strategy_len
    if len(emitted) < Ls:
        raise DimensionMismatch("remainder needs the full strategy segment first")
    return remainder_input(layout, context, emitted[:Ls], len(emitted) - Ls)


def logits(layout: PolicyLayout, params: PolicyParams, context, segment: str, emitted: Sequence[int] = ()) -> np.ndarray:
    """Logits for the next token given the context and this step's emitted tokens."""
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (layout.ctx_dim,):
        raise DimensionMismatch(f"context shape {context.shape} != ({layout.ctx_dim},)")
    x = _input_for(layout, context, segment, list(emitted))
    out, _ = head_forward(params.head(segment), x[None, :])
    return out[0]


# -- sampling and scoring --------------------------------------------------------


def _check_temp(tau):
    if not tau > 0:
        raise NonpositiveTemperature(f"temperature must be positive, got {tau}")


def tempered_probs(logit_vec, tau: float) -> np.ndarray:
    _check_temp(tau)
    return np.exp(kernels.log_softmax_rows(np.atleast_2d(logit_vec), np.array([float(tau)]))[0])


def sample_token(logit_vec, tau: float, rng: np.random.Generator, segment: str = REMAINDER) -> TokenEvent:
    _check_temp(tau)
    tok, lp = kernels.sample_rows(np.atleast_2d(logit_vec), np.array([float(tau)]), rng.random(1))
    return TokenEvent(int(tok[0]), float(lp[0]), float(tau), segment)


def entropy(logit_vec, tau: float) -> float:
    _check_temp(tau)
    return float(kernels.entropy_rows(np.atleast_2d(logit_vec), np.array([float(tau)]))[0])


def _events(events):
    out = []
    for ev in events:
        if isinstance(ev, TokenEvent):
            out.append((ev.token, ev.temperature, ev.segment))
        else:
            tok, tau, seg = ev
            out.append((int(tok), float(tau), seg))
    return out


def _step_rows(layout, context, events, dropout=False):
    """Inputs, tokens, temperatures and segments for one step's token list."""
    Ls = layout.strategy_len
    rows_s, rows_r = [], []
    emitted = []
    for tok, tau, seg in events:
        _check_temp(tau)
        if not 0 <= tok < layout.vocab_size:
            raise DimensionMismatch(f"token {tok} outside vocabulary")
        if seg == STRATEGY:
            rows_s.append((strategy_input(layout, context, emitted), tok, tau))
        else:
            pos = len(emitted) - Ls
            rows_r.append((remainder_input(layout, context, emitted[:Ls], pos, dropout), tok, tau))
        emitted.append(tok)
    return rows_s, rows_r


def sequence_logprob(layout: PolicyLayout, params: PolicyParams, context, events, dropout: bool = False):
    """Return ``(total, per_token)`` log-probabilities of one step's tokens."""
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (layout.ctx_dim,):
        raise DimensionMismatch(f"context shape {context.shape} != ({layout.ctx_dim},)")
    events = _events(events)
    rows_s, rows_r = _step_rows(layout, context, events, dropout)
    per = []
    for seg, rows in ((STRATEGY, rows_s), (REMAINDER, rows_r)):
        if not rows:
            continue
        X = np.stack([r[0] for r in rows])
        toks = np.array([r[1] for r in rows])
        temps = np.array([r[2] for r in rows])
        z, _ = head_forward(params.head(seg), X)
        lp = kernels.log_softmax_rows(z, temps)
        per.extend(lp[np.arange(len(rows)), toks].tolist())
    return float(sum(per)), per


def grad_logprob(layout: PolicyLayout, params: PolicyParams, context, events, dropout: bool = False) -> PolicyParams:
    """Analytic gradient of ``sequence_logprob(...)[0]`` w.r.t. every parameter."""
    context = np.asarray(context, dtype=np.float64)
    if context.shape != (layout.ctx_dim,):
        raise DimensionMismatch(f"context shape {context.shape} != ({layout.ctx_dim},)")
    rows_s, rows_r = _step_rows(layout, context, _events(events), dropout)
    grad = params.zeros_like()
    for seg, prefix, rows in ((STRATEGY, "s", rows_s), (REMAINDER, "r", rows_r)):
        if not rows:
            continue
        X = np.stack([r[0] for r in rows])
        toks = np.array([r[1] for r in rows])
        temps = np.array([r[2] for r in rows])
        head = params.head(seg)
        z, hid = head_forward(head, X)
        p = np.exp(kernels.log_softmax_rows(z, temps))
        G = -p
        G[np.arange(len(rows)), toks] += 1.0
        G /= temps[:, None]
        for k, g in head_backward(head, X, hid, G).items():
            grad.arrays[f"{prefix}.{k}"] += g
    return grad


# -- construction and checkpoints ----------------------------------------------


def init_params(layout: PolicyLayout, seed: int = 0, scale: float = 0.02) -> PolicyParams:
    rng = np.random.default_rng(seed)
    params = PolicyParams.zeros(layout, seed)
    for name in params.names():
        a = params.arrays[name]
        a[...] = rng.normal(0.0, scale, size=a.shape)
    return params


def build_base_policy(env: Env, config: PolicyConfig = PolicyConfig()) -> Policy:
    """Random init plus the env's base prior: a concentrated, reflection-aware base model."""
    layout = PolicyLayout.for_env(env, config.hidden)
    params = init_params(layout, config.init_seed, config.init_scale)
    prior = env.base_prior()
    V, Ls = layout.vocab_size, layout.strategy_len
    Ws, bs, Wr = params["s.W"], params["s.b"], params["r.W"]

    bs[prior.valid_strategies :] += config.junk_penalty
    for t, tok in enumerate(prior.favored):
        Ws[tok, prior.step_features[t]] += config.beta
    if prior.knowledge_strength:
        for task in range(prior.knowledge.shape[0]):
            for t in range(prior.knowledge.shape[1]):
                tok = prior.knowledge[task, t]
                if tok >= 0:
                    Ws[tok, prior.task_step_features[task, t]] += prior.knowledge_strength
    off = layout.refl_offset
    idx = np.arange(V)
    for block, strength in enumerate(
        (config.reflect_keep, config.reflect_avoid, config.reflect_unknown, config.reflect_positive)
    ):
        Ws[idx, off + block * V + idx] += strength
    n_valid = prior.remainder_table.shape[0]
    for j in range(Ls):
        cols = layout.ctx_dim + j * V + np.arange(n_valid)
        Wr[:, cols] += prior.remainder_table.T / Ls
    return Policy(layout, params, ContextEncoder(layout, env), config)


def save_params(path, layout: PolicyLayout, params: PolicyParams) -> None:
    """Flat little-endian float64 array after an 8-byte magic and seven int64 dims."""
    flat = params.flat().astype("<f8")
    header = struct.pack(
        "<7q",
        layout.vocab_size,
        layout.strategy_len,
        layout.remainder_len,
        layout.obs_dim,
        layout.hidden,
        params.seed,
        flat.size,
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC + header + flat.tobytes())


def load_params(path):
    """Return ``(layout, params)`` read from :func:`save_params` output."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError("not a policy checkpoint")
    V, Ls, Lr, obs, hidden, seed, n = struct.unpack("<7q", data[8:64])
    layout = PolicyLayout(V, Ls, Lr, obs, hidden)
    params = PolicyParams.zeros(layout, seed)
    values = np.frombuffer(data[64:], dtype="<f8")
    if values.size != n or n != params.size():
        raise DimensionMismatch("checkpoint payload does not match its header")
    params.set_flat(values.astype(np.float64))
    return layout, params
