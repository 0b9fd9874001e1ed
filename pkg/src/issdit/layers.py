"""Shared parameter-dict building blocks for the networks in this package.

Parameters live in one flat dict of name -> Tensor so the optimizer,
checkpoint writer, and gradient checks all see the same namespace. Names
use dotted prefixes ("enc.pw1.w", "blocks.3.mod.b"); helpers here append
the ".w"/".b"/".g" leaf suffixes.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with entries beyond 2 std redrawn."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def linear_spec(name: str, d_in: int, d_out: int, zero: bool = False) -> list:
    """(name, shape, init kind) rows for a linear layer."""
    kind = "zeros" if zero else "normal"
    return [(name + ".w", (d_in, d_out), kind), (name + ".b", (d_out,), "zeros")]


def layernorm_spec(name: str, d: int) -> list:
    return [(name + ".g", (d,), "ones"), (name + ".b", (d,), "zeros")]


def ffn_spec(name: str, d: int, d_hidden: int) -> list:
    """Two-linear feed-forward block d -> d_hidden -> d."""
    return linear_spec(name + ".fc1", d, d_hidden) + linear_spec(name + ".fc2", d_hidden, d)


def materialize(spec: list, rng: np.random.Generator, std: float = 0.02) -> dict:
    """Draw parameter arrays for a spec, in listed order (rng-order stable)."""
    out = {}
    for name, shape, kind in spec:
        if kind == "normal":
            out[name] = trunc_normal(rng, shape, std)
        elif kind == "zeros":
            out[name] = np.zeros(shape)
        elif kind == "ones":
            out[name] = np.ones(shape)
        else:
            raise ValueError(f"unknown init kind {kind!r} for {name!r}")
    return out


def spec_size(spec: list) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in spec)


def add_linear(params: dict, name: str, d_in: int, d_out: int,
               rng: np.random.Generator, std: float = 0.02, zero: bool = False):
    """Register weight and bias for a linear layer under `name`."""
    params.update(materialize(linear_spec(name, d_in, d_out, zero), rng, std))


def linear(x: ad.Tensor, params: dict, name: str) -> ad.Tensor:
    return ad.add(ad.matmul(x, params[name + ".w"]), params[name + ".b"])


def add_layernorm(params: dict, name: str, d: int):
    params.update(materialize(layernorm_spec(name, d), None))


def layernorm(x: ad.Tensor, params: dict, name: str) -> ad.Tensor:
    return ad.layer_norm(x, params[name + ".g"], params[name + ".b"])


def add_ffn(params: dict, name: str, d: int, d_hidden: int,
            rng: np.random.Generator, std: float = 0.02):
    params.update(materialize(ffn_spec(name, d, d_hidden), rng, std))


def ffn(x: ad.Tensor, params: dict, name: str) -> ad.Tensor:
    return linear(ad.gelu(linear(x, params, name + ".fc1")), params, name + ".fc2")


def as_tensors(arrays: dict, dtype=np.float32, trainable: bool = True) -> dict:
    """Wrap a dict of raw arrays as autodiff leaves in the given precision."""
    return {
        k: ad.Tensor(np.asarray(v, dtype=dtype), requires_grad=trainable)
        for k, v in arrays.items()
    }


def decay_mask(names) -> dict:
    """Which parameters receive weight decay: everything except layer-norm
    affine pairs and the adaptive-modulation maps."""
    mask = {}
    for n in names:
        parts = n.split(".")
        mask[n] = not any(p in ("ln", "ln1", "ln2", "mod") for p in parts)
    return mask
