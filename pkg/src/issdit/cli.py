"""Command-line surface: datagen, train, eval, ablate, report.

Config files are JSON with camelCase keys mirroring the config
dataclasses (learningRate, batchSize, issConfig.{K,p,lambdaIss},
horizon.{T,To,Ta}, model preset name or explicit dims). Exit codes:
0 success, 1 usage error, 2 runtime abort (NaN, I/O).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import dit
from . import envsim
from . import evaluation as ev
from . import iss as iss_mod
from . import policy as pol
from . import trainer as tr

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    """Bad flags or malformed config: exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; the contract wants 1.
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Config files

_CONFIG_KEYS = {
    "learningRate", "batchSize", "epochs", "weightDecay", "predictionTarget",
    "issConfig", "horizon", "seed", "numTrainSteps", "scheduleKind",
    "nPoints", "evalInterval", "condFusion", "pSchedule", "model",
    "evalRollouts", "numInferenceSteps", "task", "demoCount", "demoSeed",
    "seeds", "useEma", "augmentRotation", "augmentTranslation",
}

_ISS_KEYS = {"K", "p", "lambdaIss"}
_HORIZON_KEYS = {"T", "To", "Ta"}


def _require_known(doc: dict, allowed: set, where: str):
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise UsageError(f"unknown {where} keys {unknown}; allowed: {sorted(allowed)}")


def load_config(path) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    _require_known(doc, _CONFIG_KEYS, "config")
    return doc


def train_config_from(doc: dict) -> tr.TrainConfig:
    iss_doc = doc.get("issConfig", {})
    _require_known(iss_doc, _ISS_KEYS, "issConfig")
    hz_doc = doc.get("horizon", {})
    _require_known(hz_doc, _HORIZON_KEYS, "horizon")
    iss_cfg = iss_mod.IssConfig(
        k_skip=iss_doc.get("K", 4),
        p_ground_truth=iss_doc.get("p", 0.5),
        lambda_iss=iss_doc.get("lambdaIss", 0.4),
    )
    horizon = dit.HorizonConfig(
        T=hz_doc.get("T", 4), To=hz_doc.get("To", 2), Ta=hz_doc.get("Ta", 3),
    )
    try:
        return tr.TrainConfig(
            learning_rate=doc.get("learningRate", 1e-4),
            batch_size=doc.get("batchSize", 64),
            epochs=doc.get("epochs", 300),
            weight_decay=doc.get("weightDecay", 1e-6),
            prediction_target=doc.get("predictionTarget", "x0"),
            iss=iss_cfg,
            horizon=horizon,
            seed=doc.get("seed", 0),
            num_train_steps=doc.get("numTrainSteps", 100),
            schedule_kind=doc.get("scheduleKind", "cosine"),
            n_points=doc.get("nPoints", 64),
            eval_interval=doc.get("evalInterval", 50),
            cond_fusion=doc.get("condFusion", True),
            use_ema=doc.get("useEma", False),
            p_schedule=doc.get("pSchedule", "constant"),
            augment_rotation=doc.get("augmentRotation", False),
            augment_translation=doc.get("augmentTranslation", 0.0),
        )
    except ValueError as e:
        raise UsageError(f"invalid config: {e}") from e


def model_config_from(doc: dict, horizon_t: int) -> dit.ModelConfig:
    spec = doc.get("model", "desk")
    if isinstance(spec, str):
        try:
            return dit.preset_config(spec, action_dim=envsim.ACTION_DIM,
                                     horizon=horizon_t)
        except ValueError as e:
            raise UsageError(str(e)) from e
    _require_known(spec, {"nHead", "depth", "hiddenDim", "actionDim"}, "model")
    try:
        return dit.ModelConfig(
            n_head=spec.get("nHead", 4),
            depth=spec.get("depth", 4),
            hidden_dim=spec.get("hiddenDim", 128),
            action_dim=spec.get("actionDim", envsim.ACTION_DIM),
            horizon=horizon_t,
        )
    except ValueError as e:
        raise UsageError(f"invalid model config: {e}") from e


# ---------------------------------------------------------------------------
# Subcommands

def cmd_datagen(args) -> int:
    cfg = envsim.EnvConfig(task=args.task, point_count=args.point_count)
    episodes = envsim.generate_demos(cfg, count=args.count, seed_base=args.seed)
    envsim.save_dataset(args.out, episodes, cfg)
    lengths = [len(ep.actions) for ep in episodes]
    print(f"wrote {len(episodes)} episodes to {args.out} "
          f"(steps min {min(lengths)} max {max(lengths)})")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config(args.config)
    cfg = train_config_from(doc)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    model_cfg = model_config_from(doc, cfg.horizon.T)

    episodes, manifest = envsim.load_dataset(args.data)
    env_cfg = envsim.EnvConfig(task=manifest["task"],
                               point_count=manifest["point_count"])
    n_eval = doc.get("evalRollouts", 20)
    eval_fn = None
    if n_eval > 0:
        eval_fn = ev.make_eval_fn(
            env_cfg, train_seed=cfg.seed, n=n_eval,
            num_inference_steps=doc.get("numInferenceSteps", 10),
            train_cfg=cfg, model_cfg=model_cfg, state_dim=manifest["state_dim"],
        )
    result = tr.train(episodes, cfg, model_cfg, out_dir=args.out,
                      eval_fn=eval_fn, verbose=True)
    last = result.metrics[-1]
    print(f"done: {cfg.epochs} epochs, final loss_bc {last['loss_bc']:.6f}, "
          f"checkpoints in {Path(args.out) / 'checkpoints'}")
    if result.eval_rows:
        rates = [r["success_rate"] for r in result.eval_rows]
        print(f"eval success rates {rates}, sr5 {ev.sr5(rates):.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    handle = pol.load_handle(args.ckpt)
    cfg = envsim.EnvConfig(task=args.task, point_count=args.point_count)
    rate = ev.evaluate(handle, cfg, n=args.n, seed_base=args.seed,
                       num_inference_steps=args.num_inference_steps)
    print(f"success_rate {rate:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = load_config(args.config)
    base_cfg = train_config_from(doc)
    try:
        with open(args.grid) as f:
            grid = json.load(f)
    except json.JSONDecodeError as e:
        raise UsageError(f"{args.grid}: not valid JSON ({e})") from e
    if not isinstance(grid, dict) or not grid:
        raise UsageError(f"{args.grid}: grid must be a non-empty JSON object")

    task = doc.get("task", "PlanarPush")
    if task not in envsim.TASKS:
        raise UsageError(f"unknown task {task!r}; valid: {list(envsim.TASKS)}")
    env_cfg = envsim.EnvConfig(task=task)
    model = doc.get("model", "desk")
    if not isinstance(model, str):
        model = model_config_from(doc, base_cfg.horizon.T)
    try:
        rows, summary = ev.ablate(
            env_cfg, grid, args.out,
            train_cfg=base_cfg,
            model_preset=model,
            demo_count=doc.get("demoCount", 20),
            demo_seed_base=doc.get("demoSeed", 0),
            seeds=tuple(doc.get("seeds", (0, 1, 2))),
            n_eval=doc.get("evalRollouts", 20),
            num_inference_steps=doc.get("numInferenceSteps", 10),
            verbose=True,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    for row in summary:
        print(f"{row['cell']}: sr5 {row['sr5_mean']:.4f} +/- {row['sr5_std']:.4f} "
              f"(n={row['n_seeds']})")
    print(f"wrote {Path(args.out) / 'cells.csv'} and "
          f"{Path(args.out) / 'summary.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = ev.report(args.runs, args.out)
    print(f"summarized {len(rows)} runs into {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="issdit",
                     description="Point-cloud diffusion policy workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate expert demonstrations")
    p.add_argument("--task", required=True, choices=list(envsim.TASKS))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--point-count", type=int, default=128)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="fit a policy on a demo dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="success rate of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, choices=list(envsim.TASKS))
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--point-count", type=int, default=128)
    p.add_argument("--num-inference-steps", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep config values, 3 seeds per cell")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summarize run directories to CSV")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
