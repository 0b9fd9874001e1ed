"""The transformer action decoder.

Noisy action sequences are embedded per timestep, fused with the
point-cloud embedding, refined by a stack of adaptively modulated
attention blocks, and projected back to action space as a clean-sequence
prediction. All modulation and gating maps start at zero so the block
stack is the exact identity at initialization.

Forward functions expect batch-first Tensors: actions (B, T, A),
conditions (B, D).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoders as enc
from . import layers as ly


@dataclass(frozen=True)
class ModelConfig:
    n_head: int
    depth: int
    hidden_dim: int
    action_dim: int
    horizon: int

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.hidden_dim % self.n_head != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_head {self.n_head}"
            )


@dataclass(frozen=True)
class HorizonConfig:
    T: int
    To: int
    Ta: int

    def __post_init__(self):
        if not (1 <= self.Ta <= self.T):
            raise ValueError(f"need 1 <= Ta <= T, got Ta={self.Ta} T={self.T}")
        if self.To < 1:
            raise ValueError("To must be >= 1")


# (n_head, depth, hidden_dim); reference sizes plus the small config used
# by the end-to-end suites.
PRESETS = {
    "desk": (4, 4, 128),
    "small": (8, 8, 640),
    "medium": (8, 12, 784),
    "large": (8, 16, 1024),
}


def preset_config(name: str, action_dim: int = 2, horizon: int = 4) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    n_head, depth, hidden = PRESETS[name]
    return ModelConfig(n_head, depth, hidden, action_dim, horizon)


# ---------------------------------------------------------------------------
# Parameter layout


def dit_spec(cfg: ModelConfig, cond_fusion: bool = True) -> list:
    d = cfg.hidden_dim
    spec = ly.linear_spec("act.embed", cfg.action_dim, d)
    spec.append(("act.pos", (cfg.horizon, d), "normal"))
    if cond_fusion:
        spec += ly.linear_spec("fuse.cat", 2 * d, d)
    else:
        spec += ly.linear_spec("fuse.plain", d, d)
    for i in range(cfg.depth):
        p = f"blk{i}"
        spec += ly.linear_spec(f"{p}.qkv", d, 3 * d)
        spec += ly.linear_spec(f"{p}.attnproj", d, d)
        spec += ly.ffn_spec(f"{p}.ffn", d, 4 * d)
        spec += ly.linear_spec(f"{p}.mod", d, 6 * d, zero=True)
    spec += ly.layernorm_spec("final.ln", d)
    spec += ly.linear_spec("final.out", d, cfg.action_dim)
    return spec


def policy_spec(cfg: ModelConfig, state_dim: int, n_frames: int,
                cond_fusion: bool = True) -> list:
    """Full theta layout: observation encoders plus the decoder."""
    return (enc.pointnet_spec(cfg.hidden_dim)
            + enc.state_spec(state_dim, cfg.hidden_dim)
            + enc.frame_fusion_spec(cfg.hidden_dim, n_frames)
            + dit_spec(cfg, cond_fusion))


def init_policy_params(cfg: ModelConfig, state_dim: int, n_frames: int,
                       rng: np.random.Generator, cond_fusion: bool = True) -> dict:
    return ly.materialize(policy_spec(cfg, state_dim, n_frames, cond_fusion), rng)


def param_count(cfg: ModelConfig, state_dim: int = 2, n_frames: int = 2,
                cond_fusion: bool = True) -> int:
    """Exact trainable-parameter total from the documented shapes."""
    return ly.spec_size(policy_spec(cfg, state_dim, n_frames, cond_fusion))


def block_param_count(cfg: ModelConfig) -> int:
    d = cfg.hidden_dim
    one = (ly.linear_spec("b.qkv", d, 3 * d) + ly.linear_spec("b.attnproj", d, d)
           + ly.ffn_spec("b.ffn", d, 4 * d) + ly.linear_spec("b.mod", d, 6 * d, zero=True))
    return cfg.depth * ly.spec_size(one)


# ---------------------------------------------------------------------------
# Forward passes


def embed_actions(noisy: ad.Tensor, params: dict) -> ad.Tensor:
    """(B, T, A) -> (B, T, D): per-timestep linear map plus learned
    positional rows (broadcast over the batch)."""
    return ad.add(ly.linear(noisy, params, "act.embed"), params["act.pos"])


def _rows_like(x: ad.Tensor, z: ad.Tensor) -> ad.Tensor:
    """Broadcast (B, D) -> (B, T, D) for the token count of x."""
    b, t, _ = x.data.shape
    d = z.data.shape[-1]
    ones = ad.Tensor(np.ones((1, t, 1), dtype=z.data.dtype))
    return ad.mul(ones, ad.reshape(z, (b, 1, d)))


def fuse_condition(h: ad.Tensor, z_pc: ad.Tensor, params: dict,
                   cond_fusion: bool = True) -> ad.Tensor:
    """Rowwise fusion of the noisy-action embedding with z_pc.

    With fusion on, each row of h is concatenated with z_pc and mapped
    2D -> D by one affine layer (an affine map, not a two-layer MLP, so
    the identity-on-h initialization used by tests is exactly
    representable). With fusion off, a plain D -> D map of h alone.
    """
    if not cond_fusion:
        return ly.linear(h, params, "fuse.plain")
    zb = _rows_like(h, z_pc)
    return ly.linear(ad.concat_last([h, zb]), params, "fuse.cat")


def _attention(x: ad.Tensor, params: dict, prefix: str, n_head: int) -> ad.Tensor:
    b, t, d = x.data.shape
    dh = d // n_head
    qkv = ly.linear(x, params, f"{prefix}.qkv")
    parts = []
    for j in range(3):
        piece = ad.slice_axis(qkv, 2, j * d, (j + 1) * d)
        piece = ad.reshape(piece, (b, t, n_head, dh))
        parts.append(ad.transpose(piece, (0, 2, 1, 3)))
    q, k, v = parts
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = ad.matmul(ad.softmax_last(scores), v)
    attn = ad.reshape(ad.transpose(attn, (0, 2, 1, 3)), (b, t, d))
    return ly.linear(attn, params, f"{prefix}.attnproj")


def _modulate(x: ad.Tensor, shift: ad.Tensor, scale: ad.Tensor) -> ad.Tensor:
    """Affine-free layer-norm then x * (1 + scale) + shift."""
    return ad.add(ad.mul(ad.layer_norm(x), ad.add_const(scale, 1.0)), shift)


def dit_block(q: ad.Tensor, cond: ad.Tensor, params: dict, prefix: str,
              n_head: int) -> ad.Tensor:
    """One attention block with adaptive modulation and zero-init gates."""
    b = q.data.shape[0]
    d = q.data.shape[2]
    mod = ly.linear(cond, params, f"{prefix}.mod")
    pieces = [
        ad.reshape(ad.slice_axis(mod, 1, j * d, (j + 1) * d), (b, 1, d))
        for j in range(6)
    ]
    shift1, scale1, gate1, shift2, scale2, gate2 = pieces
    attn = _attention(_modulate(q, shift1, scale1), params, prefix, n_head)
    q = ad.add(q, ad.mul(gate1, attn))
    f = ly.ffn(_modulate(q, shift2, scale2), params, f"{prefix}.ffn")
    return ad.add(q, ad.mul(gate2, f))


def denoise(noisy: ad.Tensor, tau, ctx: enc.LatentContext, params: dict,
            cfg: ModelConfig, cond_fusion: bool = True) -> ad.Tensor:
    """Predict the clean action sequence from a noisy one.

    ctx must have been built with the same tau (its cond carries the
    timestep embedding); tau itself is not re-read here.
    """
    del tau
    h = embed_actions(noisy, params)
    q = fuse_condition(h, ctx.z_pc, params, cond_fusion)
    for i in range(cfg.depth):
        q = dit_block(q, ctx.cond, params, f"blk{i}", cfg.n_head)
    q = ly.layernorm(q, params, "final.ln")
    return ly.linear(q, params, "final.out")
