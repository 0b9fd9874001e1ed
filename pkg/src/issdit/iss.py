"""Auxiliary scene-prediction head.

Predicts the point-cloud embedding K environment steps ahead from the
current embedding and a length-K action subsequence, trained with an MSE
in embedding space. The head's parameters (psi) are separate from the
policy's (theta); the head never runs at inference time.

Action inputs arrive as plain numpy arrays: whether they are ground-truth
or (detached) model predictions is settled by scheduled sampling before
anything enters the graph, so no gradient ever flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as ly


@dataclass(frozen=True)
class IssConfig:
    k_skip: int = 4
    p_ground_truth: float = 0.5
    lambda_iss: float = 0.4

    def __post_init__(self):
        if self.k_skip < 1:
            raise ValueError("k_skip must be >= 1")
        if not 0.0 <= self.p_ground_truth <= 1.0:
            raise ValueError("p_ground_truth must lie in [0, 1]")
        if self.lambda_iss < 0.0:
            raise ValueError("lambda_iss must be >= 0")

    def validate_against(self, horizon_t: int):
        if self.k_skip > horizon_t:
            raise ValueError(f"k_skip {self.k_skip} exceeds horizon T {horizon_t}")


def iss_spec(d_model: int, k_skip: int, action_dim: int) -> list:
    """Psi layout. The action-modulation map starts at zero so the head
    initially ignores actions (adaLN collapses to plain layer-norm)."""
    return (ly.linear_spec("iss.in", d_model, d_model)
            + ly.linear_spec("iss.mod", k_skip * action_dim, 2 * d_model, zero=True)
            + ly.ffn_spec("iss.ffn1", d_model, 2 * d_model)
            + ly.ffn_spec("iss.ffn2", d_model, 2 * d_model))


def init_iss_params(d_model: int, k_skip: int, action_dim: int,
                    rng: np.random.Generator) -> dict:
    return ly.materialize(iss_spec(d_model, k_skip, action_dim), rng)


def predict_future_embedding(z_pc_now: ad.Tensor, actions, params: dict) -> ad.Tensor:
    """(B, D) current embedding + (B, K, A) actions -> (B, D) prediction.

    z = Lin(z_pc); z += FFN(LN(z) * (1 + gamma) + beta) with (gamma, beta)
    regressed from the flattened action vector; output z + FFN(z).
    """
    actions = np.asarray(actions)
    b = actions.shape[0]
    flat = ad.Tensor(actions.reshape(b, -1))
    z = ly.linear(z_pc_now, params, "iss.in")
    mod = ly.linear(flat, params, "iss.mod")
    d = z.data.shape[-1]
    gamma = ad.slice_axis(mod, 1, 0, d)
    beta = ad.slice_axis(mod, 1, d, 2 * d)
    moded = ad.add(ad.mul(ad.layer_norm(z), ad.add_const(gamma, 1.0)), beta)
    z = ad.add(z, ly.ffn(moded, params, "iss.ffn1"))
    return ad.add(z, ly.ffn(z, params, "iss.ffn2"))


def iss_loss(z_hat_future: ad.Tensor, z_target_future) -> ad.Tensor:
    """Embedding-space MSE; the target side is always treated as constant."""
    if isinstance(z_target_future, ad.Tensor):
        target = z_target_future.detach()
    else:
        target = ad.Tensor(np.asarray(z_target_future, dtype=z_hat_future.data.dtype))
    return ad.mse(z_hat_future, target)


def select_actions_scheduled(predicted: np.ndarray, ground_truth: np.ndarray,
                             p: float, rng: np.random.Generator) -> np.ndarray:
    """Per-sample scheduled sampling over (B, K, A) subsequences.

    One Bernoulli(p) draw per sample picks the entire ground-truth
    subsequence; otherwise the whole predicted one. Inputs and output are
    raw arrays (predictions are already detached by the caller).
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    predicted = np.asarray(predicted)
    ground_truth = np.asarray(ground_truth)
    if predicted.shape != ground_truth.shape:
        raise ValueError(
            f"shape mismatch {predicted.shape} vs {ground_truth.shape}"
        )
    take_gt = rng.random(predicted.shape[0]) < p
    return np.where(take_gt[:, None, None], ground_truth, predicted)
