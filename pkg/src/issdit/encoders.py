"""Observation encoders: point-cloud preprocessing, the max-pool point
encoder producing z_pc, the proprioceptive MLP producing z_state, and the
condition vector assembly C = z_pc + z_state + Emb(tau).

Forward functions operate on autodiff Tensors with any number of leading
batch axes; the feature axis is always last. Preprocessing (translate,
crop, farthest-point downsample) is plain numpy and runs once per frame
at dataset load or rollout time, never inside the training graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as ly

WORKSPACE_BOX = ((-1.0, 1.0), (-1.0, 1.0))

POINTNET_WIDTHS = (64, 128, 256)
STATE_HIDDEN = 128


# ---------------------------------------------------------------------------
# Preprocessing


def fps_downsample(points: np.ndarray, n: int, start_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling.

    Repeatedly adds the point with the largest distance to the selected
    set (ties to the lowest index), seeded at start_index. Returns the
    selected points; with n == len(points) the input comes back in its
    original order.
    """
    points = np.asarray(points)
    m = len(points)
    if m < n or n < 1:
        raise ValueError(f"cannot sample {n} points from {m}")
    if not 0 <= start_index < m:
        raise ValueError(f"start index {start_index} outside 0..{m - 1}")
    if n == m:
        return points.copy()
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start_index
    min_d2 = np.sum((points - points[start_index]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        chosen[i] = nxt
        d2 = np.sum((points - points[nxt]) ** 2, axis=1)
        np.minimum(min_d2, d2, out=min_d2)
    return points[chosen]


def preprocess_cloud(points: np.ndarray, n: int, box=WORKSPACE_BOX) -> np.ndarray:
    """Translate to the workspace center, crop to the box in xy, downsample.

    If cropping leaves fewer than n points the survivors are repeated
    cyclically before sampling so the output size stays fixed.
    """
    points = np.asarray(points, dtype=np.float64)
    (x0, x1), (y0, y1) = box
    center = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0, 0.0])
    pts = points - center
    hx, hy = (x1 - x0) / 2.0, (y1 - y0) / 2.0
    keep = (np.abs(pts[:, 0]) <= hx) & (np.abs(pts[:, 1]) <= hy)
    pts = pts[keep]
    if len(pts) == 0:
        raise ValueError("no points remain inside the workspace box")
    if len(pts) < n:
        reps = -(-n // len(pts))
        pts = np.tile(pts, (reps, 1))[:n]
    return fps_downsample(pts, n, 0)


# ---------------------------------------------------------------------------
# Parameter registration


def pointnet_spec(d_model: int, prefix: str = "enc") -> list:
    w0, w1, w2 = POINTNET_WIDTHS
    spec = []
    for i, (din, dout) in enumerate(zip((3, w0, w1), (w0, w1, w2)), start=1):
        spec += ly.linear_spec(f"{prefix}.pw{i}", din, dout)
        spec += ly.layernorm_spec(f"{prefix}.ln{i}", dout)
    return spec + ly.linear_spec(f"{prefix}.proj", w2, d_model)


def state_spec(state_dim: int, d_model: int, prefix: str = "st") -> list:
    return (ly.linear_spec(f"{prefix}.l1", state_dim, STATE_HIDDEN)
            + ly.linear_spec(f"{prefix}.l2", STATE_HIDDEN, d_model))


def frame_fusion_spec(d_model: int, n_frames: int, prefix: str = "frames") -> list:
    return (ly.linear_spec(f"{prefix}.pc", n_frames * d_model, d_model)
            + ly.linear_spec(f"{prefix}.st", n_frames * d_model, d_model))


def add_pointnet_params(params: dict, d_model: int, rng: np.random.Generator,
                        prefix: str = "enc"):
    params.update(ly.materialize(pointnet_spec(d_model, prefix), rng))


def add_state_params(params: dict, state_dim: int, d_model: int,
                     rng: np.random.Generator, prefix: str = "st"):
    params.update(ly.materialize(state_spec(state_dim, d_model, prefix), rng))


def add_frame_fusion_params(params: dict, d_model: int, n_frames: int,
                            rng: np.random.Generator, prefix: str = "frames"):
    params.update(ly.materialize(frame_fusion_spec(d_model, n_frames, prefix), rng))


# ---------------------------------------------------------------------------
# Forward passes


def encode_pointcloud(points: ad.Tensor, params: dict, prefix: str = "enc") -> ad.Tensor:
    """Pointwise MLP, max-pool over the point axis, linear projection.

    points: (..., N, 3) -> (..., D). Pointwise layers are linear ->
    layer-norm -> GELU; the pooled vector goes through a plain linear
    projection. Permutation invariance over points is exact because every
    pre-pool op is pointwise and max is order-free.
    """
    h = points
    for i in (1, 2, 3):
        h = ly.linear(h, params, f"{prefix}.pw{i}")
        h = ly.layernorm(h, params, f"{prefix}.ln{i}")
        h = ad.gelu(h)
    pooled = ad.max_axis(h, axis=-2)
    return ly.linear(pooled, params, f"{prefix}.proj")


def encode_state(state: ad.Tensor, params: dict, prefix: str = "st") -> ad.Tensor:
    """Two-layer MLP with GELU: (..., d_s) -> (..., D)."""
    h = ad.gelu(ly.linear(state, params, f"{prefix}.l1"))
    return ly.linear(h, params, f"{prefix}.l2")


def fuse_frames(per_frame: list, params: dict, modality: str,
                prefix: str = "frames") -> ad.Tensor:
    """Concatenate per-frame embeddings (oldest first) and project to D."""
    return ly.linear(ad.concat_last(per_frame), params, f"{prefix}.{modality}")


@dataclass
class LatentContext:
    """Per-sample conditioning bundle; cond = zPc + zState + tauEmb."""

    z_pc: object
    z_state: object
    tau_emb: object
    cond: object


def build_condition(z_pc: ad.Tensor, z_state: ad.Tensor, tau, d_model: int) -> LatentContext:
    """Assemble the denoising condition for timestep(s) tau.

    tau may be a scalar or a per-sample integer array; the sinusoidal
    embedding is a constant (no gradient flows into it).
    """
    if d_model % 2 != 0:
        raise ValueError(f"condition dimension must be even, got {d_model}")
    emb = ad.sinusoidal_embedding(tau, d_model, dtype=z_pc.data.dtype)
    if np.isscalar(tau) or np.asarray(tau).ndim == 0:
        emb = emb[0]
    emb_t = ad.Tensor(emb)
    cond = ad.add(ad.add(z_pc, z_state), emb_t)
    return LatentContext(z_pc=z_pc, z_state=z_state, tau_emb=emb_t, cond=cond)
