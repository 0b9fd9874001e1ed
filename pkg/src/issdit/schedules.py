"""Diffusion forward process and deterministic DDIM reverse sampling.

All functions here are pure numpy over an immutable schedule; the model
only enters through the `denoiser` callable handed to `sample_actions`.
Actions live in normalized [-1, 1] space throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_S = 0.008
BETA_MAX = 0.999


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule arrays, 0-indexed so entry i holds step tau=i."""

    num_train_steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if not np.all((self.beta > 0.0) & (self.beta <= BETA_MAX)):
            raise ValueError("beta entries must lie in (0, 0.999]")
        if not np.all(np.diff(self.alpha_bar) < 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")


def make_schedule(num_train_steps: int, kind: str = "cosine") -> DiffusionSchedule:
    """Build a cosine or linear beta schedule.

    Cosine: alphaBar targets f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1+s))
    * pi/2), s = 0.008; betas are the step ratios clipped to 0.999 and
    alphaBar is their running product (the clip only bites near t = T).
    Linear: betas evenly spaced from 1e-4 to 0.02.
    """
    if num_train_steps < 2:
        raise ValueError(f"need at least 2 train steps, got {num_train_steps}")
    t = num_train_steps
    if kind == "cosine":
        def f(step):
            return math.cos(((step / t + COSINE_S) / (1.0 + COSINE_S)) * math.pi / 2.0) ** 2

        fvals = np.array([f(i) for i in range(t + 1)])
        beta = np.minimum(1.0 - fvals[1:] / fvals[:-1], BETA_MAX)
    elif kind == "linear":
        beta = np.linspace(1e-4, 0.02, t)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return DiffusionSchedule(t, beta, alpha, alpha_bar)


def _check_tau(tau: int, sched: DiffusionSchedule):
    if not 0 <= tau < sched.num_train_steps:
        raise ValueError(f"tau {tau} outside [0, {sched.num_train_steps})")


def q_sample(x0: np.ndarray, tau: int, epsilon: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form forward marginal: sqrt(ab)*x0 + sqrt(1-ab)*epsilon."""
    _check_tau(tau, sched)
    x0 = np.asarray(x0)
    epsilon = np.asarray(epsilon)
    if x0.shape != epsilon.shape:
        raise ValueError(f"x0 shape {x0.shape} != epsilon shape {epsilon.shape}")
    ab = sched.alpha_bar[tau]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * epsilon


def ddim_timesteps(num_train_steps: int, num_inference_steps: int) -> list[int]:
    """Evenly strided descending timestep sequence for DDIM."""
    if num_inference_steps < 1 or num_train_steps % num_inference_steps != 0:
        raise ValueError(
            f"{num_inference_steps} inference steps must divide {num_train_steps}"
        )
    stride = num_train_steps // num_inference_steps
    return [(i + 1) * stride - 1 for i in range(num_inference_steps - 1, -1, -1)]


def ddim_step(
    x_tau: np.ndarray,
    x0_hat: np.ndarray,
    tau: int,
    tau_prev: int,
    sched: DiffusionSchedule,
) -> np.ndarray:
    """One deterministic (eta = 0) DDIM update in x0/eps-hat form.

    tau_prev = -1 is the terminal step, treated as alphaBar = 1 so the
    output is x0_hat exactly.
    """
    _check_tau(tau, sched)
    if tau_prev >= tau:
        raise ValueError(f"tau_prev {tau_prev} must be < tau {tau} (or -1)")
    ab_t = sched.alpha_bar[tau]
    ab_p = 1.0 if tau_prev == -1 else sched.alpha_bar[tau_prev]
    eps_hat = (x_tau - np.sqrt(ab_t) * x0_hat) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_p) * x0_hat + np.sqrt(1.0 - ab_p) * eps_hat


def epsilon_to_x0(x_tau: np.ndarray, eps_hat: np.ndarray, tau: int, sched: DiffusionSchedule) -> np.ndarray:
    """Convert a noise prediction into the equivalent clean-sample prediction."""
    _check_tau(tau, sched)
    ab = sched.alpha_bar[tau]
    return (x_tau - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def sample_actions(
    denoiser,
    context,
    sched: DiffusionSchedule,
    num_inference_steps: int,
    rng_seed: int,
    shape: tuple,
    dtype=np.float32,
) -> np.ndarray:
    """Generate one normalized action sequence by DDIM from pure noise.

    `denoiser(noisy, tau, context)` must return an x0 prediction of the
    same shape. The initial draw comes from a private PCG64 stream so a
    fixed seed reproduces the full trajectory bit for bit. Output entries
    are clamped to [-1, 1].
    """
    rng = np.random.Generator(np.random.PCG64(rng_seed))
    x = rng.standard_normal(shape).astype(dtype)
    steps = ddim_timesteps(sched.num_train_steps, num_inference_steps)
    for i, tau in enumerate(steps):
        x0_hat = np.asarray(denoiser(x, tau, context), dtype=dtype)
        tau_prev = steps[i + 1] if i + 1 < len(steps) else -1
        x = ddim_step(x, x0_hat, tau, tau_prev, sched).astype(dtype)
    return np.clip(x, -1.0, 1.0)
