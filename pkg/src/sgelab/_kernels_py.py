"""Pure numpy implementations of the row-wise sampling kernels.

Used when the compiled ``_ckernels`` extension is unavailable, or when
``SGELAB_PURE_PYTHON=1`` is set. Every function here has a twin with the
same signature in ``_ckernels.pyx``.
"""

import numpy as np


def _shifted(logits, temps):
    logits = np.asarray(logits, dtype=np.float64)
    temps = np.asarray(temps, dtype=np.float64)
    m = logits.max(axis=1, keepdims=True)
    return (logits - m) / temps[:, None]


def log_softmax_rows(logits, temps):
    """Row-wise ``log softmax(logits / temps)``."""
    z = _shifted(logits, temps)
    return z - np.log(np.cumsum(np.exp(z), axis=1)[:, -1:])


def sample_rows(logits, temps, uniforms):
    """Inverse-CDF draw of one token per row; returns ``(tokens, logprobs)``."""
    z = _shifted(logits, temps)
    e = np.exp(z)
    c = np.cumsum(e, axis=1)
    total = c[:, -1]
    target = np.asarray(uniforms, dtype=np.float64) * total
    tokens = (c <= target[:, None]).sum(axis=1)
    np.minimum(tokens, z.shape[1] - 1, out=tokens)
    rows = np.arange(z.shape[0])
    # a zero-mass token can only be selected through rounding at the row end
    bad = e[rows, tokens] == 0.0
    if bad.any():
        for i in np.flatnonzero(bad):
            tokens[i] = np.flatnonzero(e[i] > 0.0)[-1]
    logprobs = z[rows, tokens] - np.log(total)
    return tokens.astype(np.int64), logprobs


def entropy_rows(logits, temps):
    z = _shifted(logits, temps)
    e = np.exp(z)
    s = e.sum(axis=1)
    return np.log(s) - (e * z).sum(axis=1) / s


def clip_surrogate(ratios, advantages, eps):
    """Per-token PPO clipped surrogate.

    Returns ``(terms, dterm_dratio, clipped)`` where ``terms`` is
    ``min(r*A, clip(r, 1-eps, 1+eps)*A)``.
    """
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    unclipped = r * a
    clipped_val = np.clip(r, 1.0 - eps, 1.0 + eps) * a
    use_clip = clipped_val < unclipped
    terms = np.where(use_clip, clipped_val, unclipped)
    coef = np.where(use_clip, 0.0, a)
    return terms, coef, use_clip
