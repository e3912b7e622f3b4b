"""Experiment runner: ``sgelab --config run.toml``.

Per seed, artifacts land in ``<out>/seed_<seed>/``:

* ``train.csv``: one row per update (batch success rate, loss, entropy, clip
  fraction, cumulative distinct outcomes);
* ``eval.csv``: pass@k per evaluation point and split;
* ``eval_<split>.csv`` and ``eval_<split>.json``: the final evaluation;
* ``policy_init.bin`` and ``policy_final.bin``: checkpoints.

A calibrated concentration is written once to ``<out>/calibration.json``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig, load, override
from .core import TRAIN
from .envs import Env, make_env
from .evaluation import BadArguments, DistinctOutcomes, calibrate_concentration, evaluate
from .policy import ContextEncoder, Policy, PolicyLayout, build_base_policy, load_params, save_params
from .sge import Buffers, collect_groups
from .train import NonFiniteLoss, Trainer, update_step
from .xenv import ConnectFailure, connect

log = logging.getLogger("sgelab")

TRAIN_COLUMNS = ["update_index", "method", "train_pass1", "loss", "mean_entropy", "clip_fraction",
                 "distinct_outcomes_cum"]
EVAL_COLUMNS = ["update_index", "split", "k", "pass_at_k"]


class CheckpointMismatch(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])


def build_env(config: RunConfig, address: Optional[str] = None) -> Env:
    if address is None:
        return make_env(config.env.name, **config.env.params)
    env = connect(address)
    local = make_env(config.env.name, **config.env.params)
    if env.name != config.env.name or env.params() != local.params():
        raise ConfigError(
            f"remote environment {env.name} {env.params()} does not match the configured "
            f"{config.env.name} {local.params()}"
        )
    return env


def resolve_beta(config: RunConfig, env: Env, out_dir: Optional[str] = None) -> float:
    """The configured concentration, calibrating it first when asked to."""
    if config.policy.beta != "calibrate":
        return float(config.policy.beta)
    cal = config.calibration
    report = calibrate_concentration(
        env,
        config.policy.policy_config(0.0),
        cal.grid,
        seed=cal.seed,
        tau=config.eval.tau,
        target_k=cal.target_k,
        max_pass_k=cal.max_pass_k,
        max_pass_1=cal.max_pass_1,
        plateau_k=cal.plateau_k,
        max_plateau_gain=cal.max_plateau_gain,
    )
    log.info("calibrated beta = %s", report.beta)
    if out_dir is not None:
        with open(os.path.join(out_dir, "calibration.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report.beta


@dataclass
class SeedResult:
    seed: int
    policy: Policy
    train_rows: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)  # split -> EvalResult
    initial: dict = field(default_factory=dict)
    distinct: Optional[DistinctOutcomes] = None


def _evaluate_all(config: RunConfig, policy: Policy, env: Env, update_index: int, rows: list) -> dict:
    ev = config.eval
    out = {}
    for split in ev.splits:
        res = evaluate(policy, env, split, ev.attempts, ev.seed, tau=ev.tau, ks=ev.ks)
        out[split] = res
        for k in ev.ks:
            rows.append({"update_index": update_index, "split": split, "k": k, "pass_at_k": res.pass_at[k]})
    return out


def train_seed(config: RunConfig, env: Env, beta: float, seed: int, out_dir: Optional[str] = None) -> SeedResult:
    """Run one seed of ``config.updates`` collect/filter/update iterations."""
    policy = build_base_policy(env, config.policy.policy_config(beta))
    trainer = Trainer(policy, config.trainer, seed)
    tc, sc = config.trainer, config.sge
    use_sge = config.uses_sge
    tau = sc.tau
    tau_s = sc.tau_s if use_sge else sc.tau
    buffers = Buffers.empty(sc.buffer_size) if use_sge else None
    p_B, p_G = (sc.p_B, sc.p_G) if use_sge else (0.0, 0.0)
    dropout = tc.dropout_prob if tc.method == "rlad" else 0.0
    rng = np.random.default_rng([seed, 1])
    task_rng = np.random.default_rng([seed, 2])
    goals = env.tasks(TRAIN)
    n_goals = min(tc.tasks_per_update, len(goals))
    result = SeedResult(seed, policy, distinct=DistinctOutcomes())
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_params(os.path.join(out_dir, "policy_init.bin"), policy.layout, policy.params)

    result.initial = result.final = _evaluate_all(config, policy, env, 0, result.eval_rows)
    for u in range(config.updates):
        picked = [goals[i] for i in task_rng.choice(len(goals), n_goals, replace=False)]
        groups = collect_groups(policy, env, picked, tc.K, tau, tau_s, buffers, p_B, p_G, rng,
                                update_index=u, dropout_prob=dropout, reflection_mode=sc.reflection_mode)
        rewards = []
        for g in groups:
            for t in g.trajectories:
                result.distinct.add_trajectory(t)
                rewards.append(t.terminal_reward)
        try:
            _, stats = update_step(trainer, trainer.prepare(groups))
        except NonFiniteLoss as exc:
            exc.diagnostics.setdefault("update", u)
            raise
        result.train_rows.append(
            {
                "update_index": u + 1,
                "method": tc.method,
                "train_pass1": float(np.mean(rewards)),
                "loss": stats["loss"],
                "mean_entropy": stats["mean_entropy"],
                "clip_fraction": stats["clip_fraction"],
                "distinct_outcomes_cum": result.distinct.mean(),
            }
        )
        every = config.eval.every
        if (every and (u + 1) % every == 0) or u + 1 == config.updates:
            result.final = _evaluate_all(config, policy, env, u + 1, result.eval_rows)

    if out_dir is not None:
        _write_csv(os.path.join(out_dir, "train.csv"), TRAIN_COLUMNS, result.train_rows)
        _write_csv(os.path.join(out_dir, "eval.csv"), EVAL_COLUMNS, result.eval_rows)
        for split, res in result.final.items():
            res.write_csv(os.path.join(out_dir, f"eval_{split}.csv"))
            res.write_json(os.path.join(out_dir, f"eval_{split}.json"))
        save_params(os.path.join(out_dir, "policy_final.bin"), policy.layout, policy.params)
    return result


def run_train(config: RunConfig, address: Optional[str] = None) -> list:
    """Train every configured seed; returns the per-seed results."""
    if not config.uses_sge and config.sge_given:
        log.info("method %s ignores the [sge] constants; sampling uses tau=%s everywhere without reflection",
                 config.method, config.sge.tau)
    env = build_env(config, address)
    os.makedirs(config.out, exist_ok=True)
    beta = resolve_beta(config, env, config.out)
    results = []
    for seed in config.seeds:
        log.info("seed %d: %s for %d updates", seed, config.method, config.updates)
        results.append(train_seed(config, env, beta, seed, os.path.join(config.out, f"seed_{seed}")))
    return results


def run_eval(config: RunConfig, checkpoint: str, address: Optional[str] = None) -> dict:
    """Evaluate a checkpoint on the configured splits; returns split -> EvalResult."""
    try:
        layout, params = load_params(checkpoint)
    except (OSError, ValueError) as exc:
        raise CheckpointMismatch(f"cannot load {checkpoint}: {exc}") from None
    env = build_env(config, address)
    want = PolicyLayout.for_env(env, layout.hidden)
    if layout != want:
        raise CheckpointMismatch(f"checkpoint layout {layout} does not match environment layout {want}")
    beta = config.policy.beta if config.policy.beta != "calibrate" else 0.0
    policy = Policy(layout, params, ContextEncoder(layout, env), config.policy.policy_config(beta))
    os.makedirs(config.out, exist_ok=True)
    results = {}
    ev = config.eval
    for split in ev.splits:
        res = evaluate(policy, env, split, ev.attempts, ev.seed, tau=ev.tau, ks=ev.ks)
        res.write_csv(os.path.join(config.out, f"eval_{split}.csv"))
        res.write_json(os.path.join(config.out, f"eval_{split}.json"))
        results[split] = res
        log.info("%s: %s", split, {k: round(v, 4) for k, v in res.pass_at.items()})
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="sgelab", description="Train or evaluate with strategy-guided exploration.")
    ap.add_argument("--config", help="TOML run configuration (defaults apply when omitted)")
    ap.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
    ap.add_argument("--method", help="override the method: grpo, sge, entropy_adv, rnd or rlad")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--env-address", metavar="HOST:PORT", help="use a remote environment server")
    ap.add_argument("--eval-only", metavar="CHECKPOINT", help="evaluate a checkpoint instead of training")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        config = load(args.config) if args.config else RunConfig()
        config = override(config, seed=args.seed, method=args.method, out=args.out)
        if args.eval_only:
            run_eval(config, args.eval_only, args.env_address)
        else:
            run_train(config, args.env_address)
    except (ConfigError, BadArguments) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLoss as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 4
    except ConnectFailure as exc:
        print(f"cannot reach environment server: {exc}", file=sys.stderr)
        return 5
    return 0


if __name__ == "__main__":
    sys.exit(main())
