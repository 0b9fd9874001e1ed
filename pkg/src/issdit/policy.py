"""Conditional diffusion policy with an sklearn-style front door.

IssDiffusionPolicy wraps the full pipeline: fit() trains on demonstration
episodes, predict() turns an observation window into a denormalized
action plan, save()/load() move weights through the flat binary format.
The lighter PolicyHandle carries just what inference needs, so the
evaluation loop can run policies without constructing an estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import checkpoint as ckpt
from . import dit
from . import encoders as enc
from . import iss as iss_mod
from . import schedules as sch
from . import trainer as tr
from . import validation as val


@dataclass
class PolicyHandle:
    """Inference bundle: weights plus the configs that interpret them."""

    params: dict
    normalizer: tr.Normalizer
    model: dit.ModelConfig
    horizon: dit.HorizonConfig
    schedule: sch.DiffusionSchedule
    prediction_target: str = "x0"
    cond_fusion: bool = True
    n_points: int = 64
    state_dim: int = 2
    meta: dict = None


def handle_from_train(result: tr.TrainResult, cfg: tr.TrainConfig,
                      model_cfg: dit.ModelConfig, state_dim: int) -> PolicyHandle:
    return PolicyHandle(
        params=result.params,
        normalizer=result.normalizer,
        model=model_cfg,
        horizon=cfg.horizon,
        schedule=sch.make_schedule(cfg.num_train_steps, cfg.schedule_kind),
        prediction_target=cfg.prediction_target,
        cond_fusion=cfg.cond_fusion,
        n_points=cfg.n_points,
        state_dim=state_dim,
    )


def load_handle(path) -> PolicyHandle:
    arrays, meta = ckpt.load_checkpoint(path)
    if meta is None:
        raise ValueError(f"{path}: checkpoint carries no metadata")
    m, h, t = meta["model"], meta["horizon"], meta["train"]
    return PolicyHandle(
        params={k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()},
        normalizer=tr.Normalizer.from_dict(meta["normalizer"]),
        model=dit.ModelConfig(m["n_head"], m["depth"], m["hidden_dim"],
                              m["action_dim"], m["horizon"]),
        horizon=dit.HorizonConfig(h["T"], h["To"], h["Ta"]),
        schedule=sch.make_schedule(t["num_train_steps"], t["schedule_kind"]),
        prediction_target=t["prediction_target"],
        cond_fusion=t["cond_fusion"],
        n_points=t["n_points"],
        state_dim=meta["state_dim"],
        meta=meta,
    )


def plan_actions(handle: PolicyHandle, frames, rng_seed: int,
                 num_inference_steps: int = 10) -> np.ndarray:
    """Sample one denormalized (T, action_dim) plan for a raw window.

    frames: list of (points, state) pairs, oldest first; short windows
    repeat the first frame. The prediction head, if present in the
    weights, plays no part here.
    """
    frames = val.check_observation_window(frames, handle.horizon.To)
    clouds = np.stack([
        enc.preprocess_cloud(pts, handle.n_points).astype(np.float32)
        for pts, _ in frames
    ])
    states = np.stack([
        handle.normalizer.apply_states(sv).astype(np.float32) for _, sv in frames
    ])

    with ad.no_grad():
        z_pc, z_state, _ = tr.encode_window(clouds[None], states[None],
                                            handle.params)

    def denoiser(noisy, tau, _context):
        with ad.no_grad():
            ctx = enc.build_condition(z_pc, z_state, np.array([tau]),
                                      handle.model.hidden_dim)
            pred = dit.denoise(ad.Tensor(noisy), tau, ctx, handle.params,
                               handle.model, cond_fusion=handle.cond_fusion)
        out = pred.data
        if handle.prediction_target == "epsilon":
            out = sch.epsilon_to_x0(noisy, out, tau, handle.schedule)
        return out

    shape = (1, handle.horizon.T, handle.model.action_dim)
    normalized = sch.sample_actions(denoiser, None, handle.schedule,
                                    num_inference_steps, rng_seed, shape)
    return handle.normalizer.invert_actions(normalized[0].astype(np.float64))


class IssDiffusionPolicy(BaseEstimator):
    """Diffusion policy over point-cloud observations.

    Parameters mirror the training configuration; all are plain values so
    get_params/set_params/clone behave as sklearn expects. fit() consumes
    a list of successful demonstration episodes (objects with
    .observations, .actions, .success), predict() maps an observation
    window to a raw action plan.
    """

    def __init__(self, model_preset="desk", horizon_t=4, horizon_to=2,
                 horizon_ta=3, lambda_iss=0.4, k_skip=4, p_ground_truth=0.5,
                 learning_rate=1e-4, batch_size=64, epochs=300,
                 weight_decay=1e-6, prediction_target="x0",
                 num_train_steps=100, num_inference_steps=10,
                 schedule_kind="cosine", n_points=64, eval_interval=50,
                 cond_fusion=True, p_schedule="constant",
                 augment_rotation=False, augment_translation=0.0, seed=0):
        self.model_preset = model_preset
        self.horizon_t = horizon_t
        self.horizon_to = horizon_to
        self.horizon_ta = horizon_ta
        self.lambda_iss = lambda_iss
        self.k_skip = k_skip
        self.p_ground_truth = p_ground_truth
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.prediction_target = prediction_target
        self.num_train_steps = num_train_steps
        self.num_inference_steps = num_inference_steps
        self.schedule_kind = schedule_kind
        self.n_points = n_points
        self.eval_interval = eval_interval
        self.cond_fusion = cond_fusion
        self.p_schedule = p_schedule
        self.augment_rotation = augment_rotation
        self.augment_translation = augment_translation
        self.seed = seed

    # -- configuration assembly ------------------------------------------

    def _train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            weight_decay=self.weight_decay,
            prediction_target=self.prediction_target,
            iss=iss_mod.IssConfig(k_skip=self.k_skip,
                                  p_ground_truth=self.p_ground_truth,
                                  lambda_iss=self.lambda_iss),
            horizon=dit.HorizonConfig(self.horizon_t, self.horizon_to,
                                      self.horizon_ta),
            seed=self.seed,
            num_train_steps=self.num_train_steps,
            schedule_kind=self.schedule_kind,
            n_points=self.n_points,
            eval_interval=self.eval_interval,
            cond_fusion=self.cond_fusion,
            p_schedule=self.p_schedule,
            augment_rotation=self.augment_rotation,
            augment_translation=self.augment_translation,
        )

    def _model_config(self, action_dim: int) -> dit.ModelConfig:
        return dit.preset_config(self.model_preset, action_dim=action_dim,
                                 horizon=self.horizon_t)

    # -- sklearn surface ---------------------------------------------------

    def fit(self, X, y=None, out_dir=None, eval_fn=None):
        """Train on demonstration episodes. y is ignored (API compat)."""
        episodes = val.check_episodes(X)
        action_dim = int(np.asarray(episodes[0].actions[0]).shape[0])
        cfg = self._train_config()
        model_cfg = self._model_config(action_dim)
        result = tr.train(episodes, cfg, model_cfg, out_dir, eval_fn=eval_fn)
        state_dim = int(np.asarray(episodes[0].observations[0][1]).shape[0])
        self.params_ = result.params
        self.normalizer_ = result.normalizer
        self.model_config_ = model_cfg
        self.state_dim_ = state_dim
        self.metrics_ = result.metrics
        self.eval_rows_ = result.eval_rows
        return self

    def handle(self) -> PolicyHandle:
        check_is_fitted(self)
        cfg = self._train_config()
        return PolicyHandle(
            params=self.params_,
            normalizer=self.normalizer_,
            model=self.model_config_,
            horizon=cfg.horizon,
            schedule=sch.make_schedule(cfg.num_train_steps, cfg.schedule_kind),
            prediction_target=cfg.prediction_target,
            cond_fusion=cfg.cond_fusion,
            n_points=cfg.n_points,
            state_dim=self.state_dim_,
        )

    def predict(self, X, seed: int = 0) -> np.ndarray:
        """Plan actions for one raw observation window.

        X: sequence of (points, state) frames, oldest first. Returns a
        (horizon_t, action_dim) array in raw action units.
        """
        return plan_actions(self.handle(), X, rng_seed=seed,
                            num_inference_steps=self.num_inference_steps)

    # -- persistence -------------------------------------------------------

    def save(self, path):
        check_is_fitted(self)
        meta = tr.checkpoint_meta(self._train_config(), self.model_config_,
                                  self.normalizer_, self.state_dim_)
        ckpt.save_checkpoint(path, {k: p.data for k, p in self.params_.items()},
                             meta)
        return path

    @classmethod
    def load(cls, path) -> "IssDiffusionPolicy":
        handle = load_handle(path)
        meta = handle.meta
        est = cls(
            horizon_t=handle.horizon.T,
            horizon_to=handle.horizon.To,
            horizon_ta=handle.horizon.Ta,
            lambda_iss=meta["iss"]["lambda_iss"],
            k_skip=meta["iss"]["k_skip"],
            p_ground_truth=meta["iss"]["p_ground_truth"],
            prediction_target=handle.prediction_target,
            num_train_steps=handle.schedule.num_train_steps,
            schedule_kind=meta["train"]["schedule_kind"],
            n_points=handle.n_points,
            cond_fusion=handle.cond_fusion,
        )
        est.params_ = handle.params
        est.normalizer_ = handle.normalizer
        est.model_config_ = handle.model
        est.state_dim_ = handle.state_dim
        est.metrics_ = []
        est.eval_rows_ = []
        return est
