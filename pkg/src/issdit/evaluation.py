"""Receding-horizon evaluation, the top-5 success metric, and sweeps.

A rollout replans every Ta environment steps from the latest To
observation frames, executing the first Ta actions of each sampled plan.
Success rates aggregate over fixed seed blocks so results are exactly
reproducible; sr5 condenses a checkpoint series into the mean of its
five best evaluations.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dit
from . import envsim
from . import policy as pol
from . import schedules as sch
from . import trainer as tr
from . import validation as val

EVAL_SEED_STRIDE = 10_000
ABLATION_KEYS = ("lambdaIss", "K", "p", "modelPreset", "demoCount", "condFusion")


def _replan_seed(seed: int, replan_index: int) -> int:
    """Stable per-replan noise seed, independent of the render stream."""
    return int(np.random.SeedSequence([seed, 2, replan_index]).generate_state(1)[0])


def rollout(handle, env_cfg: envsim.EnvConfig, seed: int,
            num_inference_steps: int = 10, policy_fn=None) -> bool:
    """Run one closed-loop episode; returns the success flag.

    policy_fn overrides the learned policy with a (state, config) ->
    action callable (used to sanity-check the loop with the scripted
    expert). Otherwise `handle` must be a PolicyHandle or checkpoint path.
    """
    if policy_fn is None:
        if not isinstance(handle, pol.PolicyHandle):
            handle = pol.load_handle(handle)
        val.check_dims_match(
            {"state_dim": handle.state_dim,
             "model": {"action_dim": handle.model.action_dim}},
            envsim.STATE_DIM, envsim.ACTION_DIM)

    state = envsim.reset(env_cfg, seed)
    rng_render = np.random.default_rng([seed, 1])
    frames = [envsim.observe(state, env_cfg, rng_render)]
    replan = 0
    success = False
    done = False
    while not done:
        if policy_fn is not None:
            actions = [policy_fn(state, env_cfg)]
        else:
            window = frames[-handle.horizon.To:]
            plan = pol.plan_actions(handle, window, _replan_seed(seed, replan),
                                    num_inference_steps)
            actions = plan[:handle.horizon.Ta]
        replan += 1
        for action in actions:
            state, done, success = envsim.step(state, action, env_cfg)
            frames.append(envsim.observe(state, env_cfg, rng_render))
            if done:
                break
    return success


def evaluate(handle, env_cfg: envsim.EnvConfig, n: int = 20, seed_base: int = 0,
             num_inference_steps: int = 10, policy_fn=None) -> float:
    """Success fraction over rollouts seeded seed_base..seed_base+n-1."""
    if n < 1:
        raise ValueError("need at least one rollout")
    if policy_fn is None and not isinstance(handle, pol.PolicyHandle):
        handle = pol.load_handle(handle)
    wins = sum(
        rollout(handle, env_cfg, seed_base + i, num_inference_steps, policy_fn)
        for i in range(n)
    )
    return wins / n


def sr5(success_rates) -> float:
    """Mean of the five best evaluations (all of them if fewer than five)."""
    rates = list(success_rates)
    if not rates:
        raise ValueError("sr5 needs at least one evaluation")
    if len(rates) < 5:
        warnings.warn(
            f"sr5 over only {len(rates)} evaluations; averaging all of them",
            stacklevel=2,
        )
    top = sorted(rates, reverse=True)[:5]
    return float(np.mean(top))


def make_eval_fn(env_cfg: envsim.EnvConfig, train_seed: int, n: int = 20,
                 num_inference_steps: int = 10, train_cfg: tr.TrainConfig = None,
                 model_cfg: dit.ModelConfig = None, state_dim: int = 2):
    """Adapter giving trainer.train a mid-training evaluation callback.

    Rollout seeds are EVAL_SEED_STRIDE * train_seed + completed_epochs, so
    different training seeds and different checkpoints never share
    episodes.
    """

    def eval_fn(params, normalizer, completed_epochs: int) -> dict:
        handle = pol.PolicyHandle(
            params=params,
            normalizer=normalizer,
            model=model_cfg,
            horizon=train_cfg.horizon,
            schedule=sch.make_schedule(train_cfg.num_train_steps,
                                       train_cfg.schedule_kind),
            prediction_target=train_cfg.prediction_target,
            cond_fusion=train_cfg.cond_fusion,
            n_points=train_cfg.n_points,
            state_dim=state_dim,
        )
        seed_base = EVAL_SEED_STRIDE * train_seed + completed_epochs
        rate = evaluate(handle, env_cfg, n=n, seed_base=seed_base,
                        num_inference_steps=num_inference_steps)
        return {"success_rate": rate}

    return eval_fn


# ---------------------------------------------------------------------------
# Ablation sweeps


def _apply_cell(train_cfg: tr.TrainConfig, key: str, value):
    """Map one sweep setting onto the training configuration."""
    if key == "lambdaIss":
        return replace(train_cfg, iss=replace(train_cfg.iss, lambda_iss=value))
    if key == "K":
        return replace(train_cfg, iss=replace(train_cfg.iss, k_skip=value))
    if key == "p":
        return replace(train_cfg, iss=replace(train_cfg.iss, p_ground_truth=value))
    if key == "condFusion":
        return replace(train_cfg, cond_fusion=bool(value))
    return train_cfg  # modelPreset and demoCount are handled by the caller


def ablate(env_cfg: envsim.EnvConfig, grid: dict, out_dir, *,
           train_cfg: tr.TrainConfig, model_preset="desk",
           demo_count: int = 20, demo_seed_base: int = 0,
           seeds=(0, 1, 2), n_eval: int = 20, num_inference_steps: int = 10,
           verbose: bool = False):
    """Train and evaluate one cell per (sweep key, value), 3 seeds each.

    Sweeps are independent (no cartesian product). model_preset names a
    preset or gives an explicit ModelConfig; a modelPreset sweep
    overrides it per cell. Writes cells.csv with one (cell, seed, sr5)
    row per run and summary.csv with mean/std per cell; returns
    (rows, summary).
    """
    bad = [k for k in grid if k not in ABLATION_KEYS]
    if bad:
        raise ValueError(f"unknown sweep keys {bad}; valid keys: {list(ABLATION_KEYS)}")
    for key, values in grid.items():
        if key == "K":
            for v in values:
                if not 1 <= v <= train_cfg.horizon.T:
                    raise ValueError(
                        f"K={v} outside 1..T={train_cfg.horizon.T}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    demo_cache = {}

    def demos_for(count):
        if count not in demo_cache:
            demo_cache[count] = envsim.generate_demos(env_cfg, count,
                                                      demo_seed_base)
        return demo_cache[count]

    for key, values in grid.items():
        for value in values:
            cell = f"{key}={value}"
            for seed in seeds:
                count = value if key == "demoCount" else demo_count
                cfg = replace(_apply_cell(train_cfg, key, value), seed=seed)
                episodes = demos_for(count)
                if key == "modelPreset":
                    model_cfg = dit.preset_config(value, horizon=cfg.horizon.T)
                elif isinstance(model_preset, dit.ModelConfig):
                    model_cfg = replace(model_preset, horizon=cfg.horizon.T)
                else:
                    model_cfg = dit.preset_config(model_preset,
                                                  horizon=cfg.horizon.T)
                eval_fn = make_eval_fn(env_cfg, seed, n=n_eval,
                                       num_inference_steps=num_inference_steps,
                                       train_cfg=cfg, model_cfg=model_cfg)
                result = tr.train(episodes, cfg, model_cfg,
                                  out / f"{cell}_seed{seed}", eval_fn=eval_fn)
                score = sr5([r["success_rate"] for r in result.eval_rows])
                rows.append({"cell": cell, "seed": seed, "sr5": score})
                if verbose:
                    print(f"{cell} seed {seed}: sr5 {score:.3f}")

    summary = []
    for cell in dict.fromkeys(r["cell"] for r in rows):
        vals = [r["sr5"] for r in rows if r["cell"] == cell]
        summary.append({
            "cell": cell,
            "sr5_mean": float(np.mean(vals)),
            "sr5_std": float(np.std(vals)),
            "n_seeds": len(vals),
        })

    with open(out / "cells.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "seed", "sr5"])
        for r in rows:
            w.writerow([r["cell"], r["seed"], f"{r['sr5']:.6f}"])
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cell", "sr5_mean", "sr5_std", "n_seeds"])
        for s in summary:
            w.writerow([s["cell"], f"{s['sr5_mean']:.6f}",
                        f"{s['sr5_std']:.6f}", s["n_seeds"]])
    return rows, summary


# ---------------------------------------------------------------------------
# Reporting


def report(runs_dir, out_csv):
    """Summarize every run directory below runs_dir into one CSV.

    A run is any directory containing metrics.csv. Also writes one
    gnuplot-ready .dat file per run (epoch, loss_bc, loss_iss columns)
    next to the output CSV.
    """
    runs_dir = Path(runs_dir)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    run_dirs = sorted(p.parent for p in runs_dir.rglob("metrics.csv"))
    if not run_dirs:
        raise FileNotFoundError(f"no metrics.csv found under {runs_dir}")

    summary_rows = []
    for run in run_dirs:
        with open(run / "metrics.csv") as f:
            metric_rows = list(csv.DictReader(f))
        name = str(run.relative_to(runs_dir)).replace("/", "_") or run.name
        dat = out_csv.parent / f"{out_csv.stem}_{name}.dat"
        with open(dat, "w") as f:
            f.write("# epoch loss_bc loss_iss lr\n")
            for r in metric_rows:
                f.write(f"{r['epoch']} {r['loss_bc']} {r['loss_iss']} {r['lr']}\n")
        row = {
            "run": name,
            "epochs": len(metric_rows),
            "final_loss_bc": float(metric_rows[-1]["loss_bc"]),
            "best_success_rate": "",
            "sr5": "",
        }
        eval_path = run / "eval.csv"
        if eval_path.exists():
            with open(eval_path) as f:
                eval_rows = list(csv.DictReader(f))
            if eval_rows:
                rates = [float(r["success_rate"]) for r in eval_rows]
                row["best_success_rate"] = f"{max(rates):.6f}"
                row["sr5"] = f"{sr5(rates):.6f}"
        summary_rows.append(row)

    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        cols = ["run", "epochs", "final_loss_bc", "best_success_rate", "sr5"]
        w.writerow(cols)
        for r in summary_rows:
            w.writerow([r[c] for c in cols])
    return summary_rows
