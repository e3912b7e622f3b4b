"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--rows 4096] [--vocab 128] [--repeat 20]
    python benchmarks/bench_kernels.py --rollout   # also time an end-to-end rollout per backend

The rollout timing runs each backend in a fresh interpreter so that the
import-time backend selection (``SGELAB_PURE_PYTHON``) takes effect.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sgelab import _kernels_py

try:
    from sgelab import _ckernels
except ImportError:
    _ckernels = None

ROLLOUT_SNIPPET = """
import time
import numpy as np
from sgelab import kernels
from sgelab.envs import CombinationLock
from sgelab.policy import PolicyConfig, build_base_policy
from sgelab.sge import rollout
env = CombinationLock()
pol = build_base_policy(env, PolicyConfig(beta=3.0))
goals = env.tasks("train") * {episodes_per_task}
t = time.perf_counter()
rollout(pol, env, goals, np.arange(len(goals)), 0.7, 1.2, np.random.default_rng(0), record=False)
print(kernels.BACKEND, len(goals), time.perf_counter() - t)
"""


def kernel_cases(rows, vocab, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, (rows, vocab))
    t = rng.uniform(0.5, 1.5, rows)
    u = rng.random(rows)
    r = rng.uniform(0.6, 1.4, rows * 4)
    a = rng.normal(size=rows * 4)
    return {
        "log_softmax_rows": lambda m: m.log_softmax_rows(z, t),
        "sample_rows": lambda m: m.sample_rows(z, t, u),
        "entropy_rows": lambda m: m.entropy_rows(z, t),
        "clip_surrogate": lambda m: m.clip_surrogate(r, a, 0.2),
    }


def bench_kernels(rows, vocab, repeat):
    backends = [("python", _kernels_py)] + ([("cython", _ckernels)] if _ckernels is not None else [])
    print(f"kernel timings: {rows} rows x {vocab} tokens, best of {repeat} (ms)")
    print(f"{'kernel':<18}" + "".join(f"{name:>10}" for name, _ in backends) + f"{'speedup':>10}")
    for name, fn in kernel_cases(rows, vocab).items():
        times = [min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat)) * 1e3 for _, mod in backends]
        speedup = f"{times[0] / times[1]:>9.1f}x" if len(times) == 2 else f"{'n/a':>10}"
        print(f"{name:<18}" + "".join(f"{t:>10.3f}" for t in times) + speedup)


def bench_rollout(episodes_per_task):
    print(f"\nrollout timings: CombinationLock, {episodes_per_task} episodes per train task")
    code = ROLLOUT_SNIPPET.format(episodes_per_task=episodes_per_task)
    for forced in ("0", "1"):
        env = dict(os.environ, SGELAB_PURE_PYTHON=forced)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, n, secs = out.stdout.split()
        print(f"{backend:<8} {n} episodes in {float(secs):.2f}s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--vocab", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--rollout", action="store_true")
    ap.add_argument("--episodes-per-task", type=int, default=64)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; timing the numpy fallback only")
    bench_kernels(args.rows, args.vocab, args.repeat)
    if args.rollout:
        bench_rollout(args.episodes_per_task)


if __name__ == "__main__":
    main()
