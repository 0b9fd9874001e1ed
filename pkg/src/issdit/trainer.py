"""Training loop: behavior cloning plus the auxiliary future-embedding loss.

Windows are cut from demonstration episodes, normalized to [-1, 1], and
fed through the denoiser at a random diffusion timestep per sample. The
total objective is lossBc + lambda * lossIss, where the auxiliary term
asks a small head to predict the point-cloud embedding K environment
steps ahead from the current embedding and an action subsequence.

Random state is split into four independent streams (theta init, head
init, batch/noise draws, scheduled-sampling draws) so that a run with
lambda = 0 touches the policy parameters identically to a run without
the head at all.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import dit
from . import encoders as enc
from . import iss as iss_mod
from . import layers as ly
from . import schedules as sch

PREDICTION_TARGETS = ("x0", "epsilon")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 300
    weight_decay: float = 1e-6
    prediction_target: str = "x0"
    iss: iss_mod.IssConfig = field(default_factory=iss_mod.IssConfig)
    horizon: dit.HorizonConfig = field(default_factory=lambda: dit.HorizonConfig(4, 2, 3))
    seed: int = 0
    num_train_steps: int = 100
    schedule_kind: str = "cosine"
    n_points: int = 64
    eval_interval: int = 50
    cond_fusion: bool = True
    use_ema: bool = False
    p_schedule: str = "constant"  # or "linear_decay": 1.0 -> p over first half
    # SE(2) data augmentation, off by default. The expert action field is
    # equivariant under planar rotation about the workspace center and
    # invariant under translation, so both transforms generate valid
    # training pairs from each window.
    augment_rotation: bool = False
    augment_translation: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("learning_rate, batch_size, epochs must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.prediction_target not in PREDICTION_TARGETS:
            raise ValueError(f"prediction_target must be one of {PREDICTION_TARGETS}")
        if self.p_schedule not in ("constant", "linear_decay"):
            raise ValueError("p_schedule must be 'constant' or 'linear_decay'")
        if self.n_points < 1 or self.num_train_steps < 1 or self.eval_interval < 1:
            raise ValueError("n_points, num_train_steps, eval_interval must be >= 1")
        if self.augment_translation < 0:
            raise ValueError("augment_translation must be >= 0")
        self.iss.validate_against(self.horizon.T)


# ---------------------------------------------------------------------------
# Normalization


@dataclass
class Normalizer:
    """Per-dimension min-max map raw -> [-1, 1] for actions and states.

    Degenerate dimensions (max == min) get a half-unit pad on both sides
    so the map stays invertible and the constant value lands on 0.
    """

    action_min: np.ndarray
    action_max: np.ndarray
    state_min: np.ndarray
    state_max: np.ndarray

    @staticmethod
    def _bounds(columns: np.ndarray):
        lo = columns.min(axis=0).astype(np.float64)
        hi = columns.max(axis=0).astype(np.float64)
        flat = hi - lo < 1e-12
        lo[flat] -= 0.5
        hi[flat] += 0.5
        return lo, hi

    @classmethod
    def fit(cls, episodes: list) -> "Normalizer":
        if not episodes:
            raise ValueError("cannot fit a normalizer on an empty dataset")
        actions = np.concatenate([np.asarray(ep.actions, dtype=np.float64)
                                  for ep in episodes if ep.actions])
        states = np.concatenate([
            np.stack([np.asarray(s, dtype=np.float64) for _, s in ep.observations])
            for ep in episodes
        ])
        alo, ahi = cls._bounds(actions)
        slo, shi = cls._bounds(states)
        return cls(alo, ahi, slo, shi)

    @staticmethod
    def _apply(x, lo, hi):
        return 2.0 * (np.asarray(x) - lo) / (hi - lo) - 1.0

    @staticmethod
    def _invert(y, lo, hi):
        return (np.asarray(y) + 1.0) * (hi - lo) / 2.0 + lo

    def apply_actions(self, x):
        return self._apply(x, self.action_min, self.action_max)

    def invert_actions(self, y):
        return self._invert(y, self.action_min, self.action_max)

    def apply_states(self, x):
        return self._apply(x, self.state_min, self.state_max)

    def invert_states(self, y):
        return self._invert(y, self.state_min, self.state_max)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("action_min", "action_max", "state_min", "state_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(**{k: np.asarray(d[k], dtype=np.float64)
                      for k in ("action_min", "action_max", "state_min", "state_max")})


# ---------------------------------------------------------------------------
# Window extraction


@dataclass
class TrainWindow:
    """One training sample, fully materialized and normalized.

    obs_clouds: (To, N, 3) preprocessed point clouds, oldest frame first.
    obs_states: (To, state_dim) normalized proprioception.
    action_target: (T, action_dim) normalized actions starting at this
    window's anchor step.
    future_cloud: preprocessed cloud K steps past the anchor, or None
    when the episode ends first.
    """

    obs_clouds: np.ndarray
    obs_states: np.ndarray
    action_target: np.ndarray
    future_cloud: np.ndarray


def extract_windows(episodes: list, horizon: dit.HorizonConfig, k_skip: int,
                    normalizer: Normalizer, n_points: int) -> list:
    """One window per demonstrated action; windows never cross episodes.

    The first observation frame is repeated for anchors younger than
    To - 1, and the last action is repeated for anchors within T - 1 of
    the episode end.
    """
    windows = []
    for ep in episodes:
        n_actions = len(ep.actions)
        clouds = [enc.preprocess_cloud(pts, n_points).astype(np.float32)
                  for pts, _ in ep.observations]
        states = np.stack([
            normalizer.apply_states(sv).astype(np.float32)
            for _, sv in ep.observations
        ])
        actions = normalizer.apply_actions(
            np.asarray(ep.actions, dtype=np.float64)).astype(np.float32)
        for t in range(n_actions):
            obs_idx = [max(0, t - horizon.To + 1 + i) for i in range(horizon.To)]
            act_idx = [min(n_actions - 1, t + i) for i in range(horizon.T)]
            future = clouds[t + k_skip] if t + k_skip < len(clouds) else None
            windows.append(TrainWindow(
                obs_clouds=np.stack([clouds[j] for j in obs_idx]),
                obs_states=states[obs_idx],
                action_target=actions[act_idx],
                future_cloud=future,
            ))
    return windows


def count_windows(episodes: list, k_skip: int):
    """(total, with_future) window counts implied by the extraction rule."""
    total = sum(len(ep.actions) for ep in episodes)
    with_future = sum(max(0, len(ep.observations) - k_skip) for ep in episodes)
    return total, with_future


# ---------------------------------------------------------------------------
# Forward pass and loss


def encode_window(clouds: np.ndarray, states: np.ndarray, params: dict):
    """Shared observation encoder for a batch of windows.

    clouds (B, To, N, 3), states (B, To, ds) -> (z_pc, z_state,
    z_pc_now) where z_pc_now is the unfused current-frame cloud
    embedding used by the future-prediction head.
    """
    n_frames = clouds.shape[1]
    per_pc = [enc.encode_pointcloud(ad.Tensor(clouds[:, j]), params)
              for j in range(n_frames)]
    per_st = [enc.encode_state(ad.Tensor(states[:, j]), params)
              for j in range(n_frames)]
    z_pc = enc.fuse_frames(per_pc, params, "pc")
    z_state = enc.fuse_frames(per_st, params, "st")
    return z_pc, z_state, per_pc[-1]


def q_sample_batch(x0: np.ndarray, taus: np.ndarray, epsilon: np.ndarray,
                   sched: sch.DiffusionSchedule) -> np.ndarray:
    """Vectorized forward-noising for per-sample timesteps."""
    ab = sched.alpha_bar[taus].astype(x0.dtype)[:, None, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * epsilon


def x0_from_prediction(pred: np.ndarray, noisy: np.ndarray, taus: np.ndarray,
                       sched: sch.DiffusionSchedule, prediction_target: str) -> np.ndarray:
    """Clean-action estimate implied by the network output (detached)."""
    if prediction_target == "x0":
        return pred
    ab = sched.alpha_bar[taus].astype(pred.dtype)[:, None, None]
    return (noisy - np.sqrt(1.0 - ab) * pred) / np.sqrt(ab)


@dataclass
class Batch:
    clouds: np.ndarray
    states: np.ndarray
    targets: np.ndarray
    future_clouds: np.ndarray  # (F, N, 3), rows aligned with future_index
    future_index: np.ndarray  # indices into the batch that have a future


def collate(windows: list, dtype=np.float32) -> Batch:
    idx = [i for i, w in enumerate(windows) if w.future_cloud is not None]
    future = (np.stack([windows[i].future_cloud for i in idx]).astype(dtype)
              if idx else np.zeros((0, 1, 3), dtype=dtype))
    return Batch(
        clouds=np.stack([w.obs_clouds for w in windows]).astype(dtype),
        states=np.stack([w.obs_states for w in windows]).astype(dtype),
        targets=np.stack([w.action_target for w in windows]).astype(dtype),
        future_clouds=future,
        future_index=np.asarray(idx, dtype=np.int64),
    )


def _rotate_xy(xy, c, s):
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


def augment_batch(batch: Batch, cfg: TrainConfig, normalizer: Normalizer,
                  rng: np.random.Generator) -> Batch:
    """Per-window random planar rotation about the origin plus translation.

    Points rotate and shift, states follow them through the normalizer's
    affine map, action displacements only rotate, and each future cloud
    reuses its source window's transform. The draw order is fixed by the
    config alone so rng consumption never depends on batch content.
    """
    if not cfg.augment_rotation and cfg.augment_translation == 0.0:
        return batch
    b = len(batch.targets)
    if batch.states.shape[-1] != 2:
        raise ValueError("augmentation assumes planar (x, y) states")
    theta = (rng.uniform(-np.pi, np.pi, size=b) if cfg.augment_rotation
             else np.zeros(b))
    shift = (rng.uniform(-cfg.augment_translation, cfg.augment_translation,
                         size=(b, 2))
             if cfg.augment_translation > 0 else np.zeros((b, 2)))
    c, s = np.cos(theta), np.sin(theta)
    dtype = batch.clouds.dtype

    cl = np.array(batch.clouds, dtype=np.float64)
    cl[..., :2] = (_rotate_xy(cl[..., :2], c[:, None, None], s[:, None, None])
                   + shift[:, None, None, :])

    raw_states = normalizer.invert_states(batch.states.astype(np.float64))
    raw_states = _rotate_xy(raw_states, c[:, None], s[:, None]) + shift[:, None, :]
    states = normalizer.apply_states(raw_states)

    raw_actions = normalizer.invert_actions(batch.targets.astype(np.float64))
    raw_actions = _rotate_xy(raw_actions, c[:, None], s[:, None])
    targets = normalizer.apply_actions(raw_actions)

    fut = np.array(batch.future_clouds, dtype=np.float64)
    if len(batch.future_index):
        fc = c[batch.future_index][:, None]
        fs = s[batch.future_index][:, None]
        fut[..., :2] = (_rotate_xy(fut[..., :2], fc, fs)
                        + shift[batch.future_index][:, None, :])

    return Batch(
        clouds=cl.astype(dtype),
        states=states.astype(dtype),
        targets=targets.astype(dtype),
        future_clouds=fut.astype(dtype),
        future_index=batch.future_index,
    )


def compute_loss(batch: Batch, params: dict, sched: sch.DiffusionSchedule,
                 cfg: TrainConfig, model_cfg: dit.ModelConfig,
                 rng_main: np.random.Generator, rng_iss: np.random.Generator,
                 p_ground_truth: float = None, denoise_fn=None):
    """Returns (loss_bc, loss_iss, total) as scalar graph nodes.

    Per sample: a uniform timestep and a fresh noise draw corrupt the
    action target; the denoiser runs once. The auxiliary loss is averaged
    over the samples that still have a frame K steps ahead; everything
    else contributes only to the cloning term.
    """
    dtype = batch.targets.dtype
    b = batch.targets.shape[0]
    lam = cfg.iss.lambda_iss
    if p_ground_truth is None:
        p_ground_truth = cfg.iss.p_ground_truth

    taus = rng_main.integers(0, sched.num_train_steps, size=b)
    epsilon = rng_main.standard_normal(batch.targets.shape, dtype=dtype)
    noisy = q_sample_batch(batch.targets, taus, epsilon, sched)

    z_pc, z_state, z_pc_now = encode_window(batch.clouds, batch.states, params)
    ctx = enc.build_condition(z_pc, z_state, taus, model_cfg.hidden_dim)
    if denoise_fn is None:
        pred = dit.denoise(ad.Tensor(noisy), taus, ctx, params, model_cfg,
                           cond_fusion=cfg.cond_fusion)
    else:
        pred = denoise_fn(ad.Tensor(noisy), taus, ctx)

    reference = batch.targets if cfg.prediction_target == "x0" else epsilon
    loss_bc = ad.mse(pred, ad.Tensor(reference))
    if np.isnan(loss_bc.data):
        bad = np.flatnonzero(np.isnan(pred.data.reshape(b, -1)).any(axis=1))
        raise FloatingPointError(
            f"NaN cloning loss; taus={taus.tolist()} bad_samples={bad.tolist()}"
        )

    n_future = len(batch.future_index)
    if lam == 0.0 or n_future == 0 or not any(k.startswith("iss.") for k in params):
        return loss_bc, ad.Tensor(np.asarray(0.0, dtype=dtype)), loss_bc

    k = cfg.iss.k_skip
    x0_hat = x0_from_prediction(pred.data, noisy, taus, sched, cfg.prediction_target)
    mixed = iss_mod.select_actions_scheduled(
        x0_hat[batch.future_index, :k, :],
        batch.targets[batch.future_index, :k, :],
        p_ground_truth, rng_iss,
    )
    # Row-select the live current-frame embeddings with a constant 0/1
    # matrix so gradients scatter back only to the chosen rows.
    sel = np.zeros((n_future, b), dtype=dtype)
    sel[np.arange(n_future), batch.future_index] = 1.0
    z_now_sub = ad.matmul(ad.Tensor(sel), z_pc_now)
    with ad.no_grad():
        z_target = enc.encode_pointcloud(ad.Tensor(batch.future_clouds), params)
    z_hat = iss_mod.predict_future_embedding(z_now_sub, mixed, params)
    loss_iss = iss_mod.iss_loss(z_hat, z_target.data)
    if np.isnan(loss_iss.data):
        raise FloatingPointError(
            f"NaN auxiliary loss; taus={taus.tolist()} "
            f"future_samples={batch.future_index.tolist()}"
        )
    total = ad.add(loss_bc, ad.scale(loss_iss, lam))
    return loss_bc, loss_iss, total


# ---------------------------------------------------------------------------
# Optimizer and schedule


class AdamW:
    """Decoupled weight decay; parameters with no gradient are skipped."""

    def __init__(self, params: dict, learning_rate: float,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_mask: dict = None):
        self.params = params
        self.lr = learning_rate
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.mask = decay_mask if decay_mask is not None else ly.decay_mask(params)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and self.mask.get(name, True):
                update = update + self.wd * p.data
            p.data -= self.lr * update


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """Cosine decay from base_lr at epoch 0 to exactly 0 at the last epoch."""
    if total_epochs <= 1:
        return base_lr
    frac = epoch / (total_epochs - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def scheduled_p(cfg: TrainConfig, epoch: int) -> float:
    if cfg.p_schedule == "constant":
        return cfg.iss.p_ground_truth
    half = max(1, cfg.epochs // 2)
    frac = min(1.0, epoch / half)
    return 1.0 + (cfg.iss.p_ground_truth - 1.0) * frac


# ---------------------------------------------------------------------------
# Training driver


@dataclass
class TrainResult:
    params: dict
    normalizer: Normalizer
    metrics: list
    checkpoint_paths: list
    eval_rows: list


def init_params(model_cfg: dit.ModelConfig, cfg: TrainConfig, state_dim: int,
                rng_theta: np.random.Generator, rng_psi: np.random.Generator,
                with_iss_head: bool, dtype=np.float32) -> dict:
    """Policy weights from one stream, head weights from another.

    Keeping the streams separate means adding or removing the head never
    perturbs the policy's starting point.
    """
    arrays = dit.init_policy_params(model_cfg, state_dim, cfg.horizon.To,
                                    rng_theta, cond_fusion=cfg.cond_fusion)
    if with_iss_head:
        arrays.update(iss_mod.init_iss_params(
            model_cfg.hidden_dim, cfg.iss.k_skip, model_cfg.action_dim, rng_psi))
    return ly.as_tensors(arrays, dtype=dtype)


def checkpoint_meta(cfg: TrainConfig, model_cfg: dit.ModelConfig,
                    normalizer: Normalizer, state_dim: int) -> dict:
    return {
        "model": {
            "n_head": model_cfg.n_head,
            "depth": model_cfg.depth,
            "hidden_dim": model_cfg.hidden_dim,
            "action_dim": model_cfg.action_dim,
            "horizon": model_cfg.horizon,
        },
        "horizon": {"T": cfg.horizon.T, "To": cfg.horizon.To, "Ta": cfg.horizon.Ta},
        "iss": {
            "k_skip": cfg.iss.k_skip,
            "p_ground_truth": cfg.iss.p_ground_truth,
            "lambda_iss": cfg.iss.lambda_iss,
        },
        "train": {
            "prediction_target": cfg.prediction_target,
            "num_train_steps": cfg.num_train_steps,
            "schedule_kind": cfg.schedule_kind,
            "n_points": cfg.n_points,
            "cond_fusion": cfg.cond_fusion,
            "augment_rotation": cfg.augment_rotation,
            "augment_translation": cfg.augment_translation,
        },
        "state_dim": state_dim,
        "normalizer": normalizer.to_dict(),
    }


def train(episodes: list, cfg: TrainConfig, model_cfg: dit.ModelConfig,
          out_dir=None, *, with_iss_head: bool = None, eval_fn=None,
          dtype=np.float32, verbose: bool = False) -> TrainResult:
    """Fit the policy (and head) on demonstration episodes.

    Writes per-epoch rows to metrics.csv and a checkpoint every
    eval_interval completed epochs plus one at the end, calling eval_fn
    (params, normalizer, completed_epochs) -> dict after each checkpoint
    when provided. Everything is reproducible from cfg.seed alone.
    """
    if not episodes:
        raise ValueError("cannot train on an empty dataset")
    if with_iss_head is None:
        with_iss_head = cfg.iss.lambda_iss > 0

    root = np.random.SeedSequence(cfg.seed)
    ss_theta, ss_psi, ss_main, ss_iss = root.spawn(4)
    rng_theta = np.random.default_rng(ss_theta)
    rng_psi = np.random.default_rng(ss_psi)
    rng_main = np.random.default_rng(ss_main)
    rng_iss = np.random.default_rng(ss_iss)

    normalizer = Normalizer.fit(episodes)
    windows = extract_windows(episodes, cfg.horizon, cfg.iss.k_skip,
                              normalizer, cfg.n_points)
    state_dim = windows[0].obs_states.shape[-1]
    params = init_params(model_cfg, cfg, state_dim, rng_theta, rng_psi,
                         with_iss_head, dtype=dtype)
    sched = sch.make_schedule(cfg.num_train_steps, cfg.schedule_kind)
    opt = AdamW(params, cfg.learning_rate, weight_decay=cfg.weight_decay)
    ema = {k: p.data.copy() for k, p in params.items()} if cfg.use_ema else None

    out = Path(out_dir) if out_dir is not None else None
    metrics_file = metrics_writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        metrics_file = open(out / "metrics.csv", "w", newline="")
        metrics_writer = csv.writer(metrics_file)
        metrics_writer.writerow(["epoch", "seed", "loss_bc", "loss_iss", "lr"])

    meta = checkpoint_meta(cfg, model_cfg, normalizer, state_dim)
    metrics, checkpoint_paths, eval_rows = [], [], []
    try:
        for epoch in range(cfg.epochs):
            opt.lr = cosine_lr(epoch, cfg.epochs, cfg.learning_rate)
            p_gt = scheduled_p(cfg, epoch)
            order = rng_main.permutation(len(windows))
            bc_sum = iss_sum = 0.0
            n_bc = n_iss = 0
            for lo in range(0, len(order), cfg.batch_size):
                chunk = [windows[i] for i in order[lo:lo + cfg.batch_size]]
                batch = collate(chunk, dtype=dtype)
                batch = augment_batch(batch, cfg, normalizer, rng_main)
                opt.zero_grad()
                loss_bc, loss_iss, total = compute_loss(
                    batch, params, sched, cfg, model_cfg, rng_main, rng_iss,
                    p_ground_truth=p_gt)
                total.backward()
                opt.step()
                if ema is not None:
                    for k, p in params.items():
                        ema[k] += 0.005 * (p.data - ema[k])
                bc_sum += float(loss_bc.data) * len(chunk)
                n_bc += len(chunk)
                f = len(batch.future_index)
                iss_sum += float(loss_iss.data) * f
                n_iss += f
            row = {
                "epoch": epoch,
                "loss_bc": bc_sum / n_bc,
                "loss_iss": iss_sum / n_iss if n_iss else 0.0,
                "lr": opt.lr,
            }
            metrics.append(row)
            if metrics_writer is not None:
                metrics_writer.writerow([row["epoch"], cfg.seed,
                                         f"{row['loss_bc']:.10e}",
                                         f"{row['loss_iss']:.10e}", f"{row['lr']:.10e}"])
                metrics_file.flush()
            if verbose:
                print(f"epoch {epoch}: bc {row['loss_bc']:.5f} "
                      f"iss {row['loss_iss']:.5f} lr {row['lr']:.2e}")

            completed = epoch + 1
            if completed % cfg.eval_interval == 0 or completed == cfg.epochs:
                weights = ema if ema is not None else {
                    k: p.data for k, p in params.items()}
                if out is not None:
                    path = out / "checkpoints" / f"ep{completed:05d}.issw"
                    ckpt.save_checkpoint(path, weights, meta)
                    checkpoint_paths.append(path)
                if eval_fn is not None:
                    result = eval_fn(params, normalizer, completed)
                    eval_rows.append({"epoch": completed, **result})
    finally:
        if metrics_file is not None:
            metrics_file.close()

    if out is not None and checkpoint_paths:
        final = out / "policy.issw"
        final.write_bytes(Path(checkpoint_paths[-1]).read_bytes())
    if out is not None and eval_rows:
        with open(out / "eval.csv", "w", newline="") as f:
            writer = csv.writer(f)
            extra = [c for c in eval_rows[0] if c != "epoch"]
            writer.writerow(["epoch", "seed"] + extra)
            for row in eval_rows:
                writer.writerow([row["epoch"], cfg.seed] + [row[c] for c in extra])
    return TrainResult(params, normalizer, metrics, checkpoint_paths, eval_rows)
