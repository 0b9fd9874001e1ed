"""Dense-tensor compute core with reverse-mode automatic differentiation.

Everything downstream (encoders, transformer blocks, the scene-prediction
head) is built from the operations in this module. Tensors wrap numpy
arrays in row-major layout with the feature dimension last. Two precisions
are supported: float32 for training, float64 for gradient verification.

The engine is define-by-run: calling an operation on `Tensor` inputs
records the node needed for the backward pass. `backward()` walks the
recorded tape; `Graph` wraps a named-leaf computation so that callers can
evaluate, backprop, and finite-difference-check it as a unit.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """An operation received operands with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class GraphStateError(RuntimeError):
    """A graph was queried for gradients before it was evaluated."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array node on the autodiff tape.

    `data` is always a numpy array (float32 or float64). `requires_grad`
    marks trainable leaves; interior nodes participate in backprop when
    any ancestor is trainable. Parameter tensors are treated as immutable
    during evaluation: optimizers replace `data` between steps instead of
    mutating it in place mid-graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """A constant tensor sharing this tensor's values."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def backward(self, seed=None):
        """Reverse-mode sweep seeding this node with `seed` (default ones)."""
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeMismatch("backward-seed", seed.shape, self.data.shape)
        order = _toposort(self)
        self.grad = seed
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Small operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor) -> list:
    """Reverse topological order of the tape reachable from `root`."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _needs_tape(*tensors: Tensor) -> bool:
    if not _GRAD_ENABLED:
        return False
    return any(t.requires_grad or t._parents for t in tensors)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _needs_tape(*parents):
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Elementwise and broadcasting arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch("sub", a.shape, b.shape) from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), backward)


def add_const(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, g)

    return _make(a.data + c, (a,), backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ---------------------------------------------------------------------------
# Linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting; 1-D lhs acts as a row vector."""
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    vec = a.data.ndim == 1
    a2 = a.data[None, :] if vec else a.data
    try:
        data = a2 @ b.data
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None
    if vec:
        data = data.reshape(data.shape[:-2] + data.shape[-1:])

    def backward(g):
        g2 = g[..., None, :] if vec else g
        _accumulate(a, _unbroadcast(g2 @ b.data.swapaxes(-1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(a2.swapaxes(-1, -2) @ g2, b.data.shape))

    return _make(data, (a, b), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the feature (last) axis."""
    parts = list(parts)
    lead = parts[0].data.shape[:-1]
    if any(p.data.shape[:-1] != lead for p in parts):
        raise ShapeMismatch("concat_last", *[p.shape for p in parts])
    data = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.data.shape[-1] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, splits, axis=-1)):
            _accumulate(p, piece)

    return _make(data, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _make(a.data[idx], (a,), backward)


# ---------------------------------------------------------------------------
# Reductions


def sum_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape).astype(a.data.dtype))

    return _make(data, (a,), backward)


def mean_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_axis(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max-reduction over one axis; gradient flows to the first argmax."""
    data = a.data.max(axis=axis)
    idx = np.argmax(a.data, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(
            full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        _accumulate(a, full)

    return _make(data, (a,), backward)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared componentwise differences, as a scalar node."""
    if pred.data.shape != target.data.shape:
        raise ShapeMismatch("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    data = np.asarray((diff * diff).mean(), dtype=pred.data.dtype)
    coef = 2.0 / diff.size

    def backward(g):
        base = (coef * g) * diff
        _accumulate(pred, base)
        _accumulate(target, -base)

    return _make(data, (pred, target), backward)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    # In-place staging: this op dominates training time, so avoid np.power
    # and keep the temporary count down. u = C * (A*x^3 + x), same math.
    x = a.data
    u = x * x
    u *= _GELU_A
    u += 1.0
    u *= x
    u *= _GELU_C
    t = np.tanh(u)
    data = t + 1.0
    data *= x
    data *= 0.5

    def backward(g):
        # d/dx = 0.5*((1 + t) + x*(1 - t^2)*du), du = C*(1 + 3A*x^2)
        du = x * x
        du *= 3.0 * _GELU_A
        du += 1.0
        du *= _GELU_C
        s = t * t
        np.subtract(1.0, s, out=s)
        s *= du
        s *= x
        s += 1.0
        s += t
        s *= 0.5
        s *= g
        _accumulate(a, s)

    return _make(data, (a,), backward)


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for overflow safety."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, y * (g - inner))

    return _make(y, (a,), backward)


def layer_norm(
    a: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = 1e-5,
) -> Tensor:
    """Layer normalization over the last axis, optional learned affine.

    Population statistics (biased variance), matching the value oracle:
    subtract the mean, divide by sqrt(var + eps), then gamma * y + beta
    when the affine pair is given.
    """
    if (gamma is None) != (beta is None):
        raise ValueError("layer_norm: gamma and beta must be given together")
    d = a.data.shape[-1]
    if gamma is not None and (gamma.data.shape != (d,) or beta.data.shape != (d,)):
        raise ShapeMismatch("layer_norm-affine", a.shape, gamma.shape, beta.shape)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    if gamma is None:
        def backward(g):
            gy = (g * y).mean(axis=-1, keepdims=True)
            gm = g.mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (g - gm - y * gy))

        return _make(y, (a,), backward)

    data = y * gamma.data + beta.data

    def backward(g):
        red = tuple(range(g.ndim - 1))
        _accumulate(gamma, (g * y).sum(axis=red))
        _accumulate(beta, g.sum(axis=red))
        gh = g * gamma.data
        gy = (gh * y).mean(axis=-1, keepdims=True)
        gm = gh.mean(axis=-1, keepdims=True)
        _accumulate(a, inv * (gh - gm - y * gy))

    return _make(data, (a, gamma, beta), backward)


def sinusoidal_embedding(taus, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal timestep embedding lookup (a constant, not a tape node).

    Layout: entry i of the first dim/2 is sin(tau / 10000^(2i/dim)), the
    second half holds the matching cosines.
    """
    if dim % 2 != 0:
        raise ValueError(f"sinusoidal_embedding: dim must be even, got {dim}")
    taus = np.atleast_1d(np.asarray(taus, dtype=np.float64))
    i = np.arange(dim // 2, dtype=np.float64)
    freq = 1.0 / np.power(10000.0, 2.0 * i / dim)
    ang = taus[:, None] * freq[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)
    return emb


# ---------------------------------------------------------------------------
# Named-leaf graph wrapper


class Graph:
    """A single-output computation over named leaves.

    `build` maps a dict of named leaf Tensors to one output Tensor. The
    graph caches the most recent evaluation so gradients can be pulled
    afterwards; re-evaluating replaces the tape.
    """

    def __init__(self, build: Callable[[dict], Tensor]):
        self.build = build
        self._leaves: dict[str, Tensor] | None = None
        self._output: Tensor | None = None

    def evaluate(self, inputs: dict) -> np.ndarray:
        """Bind `inputs` (arrays become trainable leaves) and run forward."""
        leaves = {}
        for name, value in inputs.items():
            leaves[name] = value if isinstance(value, Tensor) else Tensor(
                np.asarray(value), requires_grad=True
            )
        out = self.build(leaves)
        self._leaves = leaves
        self._output = out
        return out.data

    def backprop(self, seed_gradient=None) -> dict[str, np.ndarray]:
        """Gradients of the last evaluation for every trainable leaf.

        Leaves that do not participate in the output get exact zeros.
        """
        if self._output is None:
            raise GraphStateError("backprop called before evaluate")
        for t in self._leaves.values():
            t.zero_grad()
        self._output.backward(seed_gradient)
        grads = {}
        for name, leaf in self._leaves.items():
            if not leaf.requires_grad:
                continue
            grads[name] = (
                leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            )
        return grads


def grad_check(
    graph: Graph,
    params: dict,
    step: float = 1e-5,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Parameters must be float64 for the differences to resolve. By default
    every entry of every parameter is checked; `max_entries_per_param`
    subsamples entries for large graphs (deterministic under `rng`).
    Relative error: |a - n| / max(1e-8, |a| + |n|).
    """
    tensors = {
        name: value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        for name, value in params.items()
    }
    for name, t in tensors.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters, got {t.data.dtype} for {name!r}")
    out = graph.evaluate(tensors)
    if np.asarray(out).size != 1:
        raise ValueError(f"grad_check requires a scalar output, got shape {np.asarray(out).shape}")
    analytic = graph.backprop(np.ones_like(out))
    if rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            entries = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            entries = range(n)
        a_flat = analytic[name].reshape(-1)
        for k in entries:
            orig = flat[k]
            flat[k] = orig + step
            hi = float(graph.evaluate(tensors))
            flat[k] = orig - step
            lo = float(graph.evaluate(tensors))
            flat[k] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = float(a_flat[k])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    # Restore the unperturbed tape so a later backprop() is consistent.
    graph.evaluate(tensors)
    graph.backprop(np.ones_like(out))
    return worst
