"""Shared oracles for the test suite."""

import numpy as np

from sgelab.core import REMAINDER, STRATEGY
from sgelab.policy import PolicyLayout, init_params

FD_STEP = 1e-5


def central_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at flat vector ``x``."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest gradient entry."""
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def random_instance(seed: int):
    """Small random layout, params, context and one step of mixed-temperature tokens."""
    rng = np.random.default_rng(seed)
    layout = PolicyLayout(
        vocab_size=int(rng.integers(2, 5)),
        strategy_len=int(rng.integers(1, 3)),
        remainder_len=int(rng.integers(1, 3)),
        obs_dim=int(rng.integers(2, 5)),
        hidden=int(rng.choice([0, 3])),
    )
    params = init_params(layout, seed, scale=0.5)
    ctx = rng.normal(size=layout.ctx_dim)
    V = layout.vocab_size
    tau, tau_s = float(rng.uniform(0.5, 1.0)), float(rng.uniform(1.0, 1.5))
    events = [(int(rng.integers(V)), tau_s, STRATEGY) for _ in range(layout.strategy_len)]
    events += [(int(rng.integers(V)), tau, REMAINDER) for _ in range(layout.remainder_len)]
    return layout, params, ctx, events
