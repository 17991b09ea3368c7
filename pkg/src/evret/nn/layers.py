"""Differentiable building blocks: masked multi-head attention, cross
attention, 1-D convolution, layer norm, and pre-norm encoder layers.

Self-attention here is distance-masked: each head carries an anchor size
``a`` and a query position may only attend to keys within distance ``a``
(or everywhere, for the ALL sentinel). Distances default to index offsets
but callers may supply any nonnegative distance matrix, which is how
mixed event/subtitle token layouts define their neighborhoods.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from evret.errors import ShapeError
from evret.nn.params import ParameterSet, add_layer_norm
from evret.nn.tensor import Tensor, pad_rows

MASK_BIAS = -1e9
LN_EPS = 1e-5


class _AllAnchor:
    """Sentinel: a head with unrestricted attention range."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ALL"


ALL = _AllAnchor()


@dataclass(frozen=True)
class AnchorMaskSpec:
    """Per-head anchor sizes; one entry per attention head."""

    sizes: tuple

    def __post_init__(self):
        for a in self.sizes:
            if a is not ALL and (not isinstance(a, int) or a < 1):
                raise ShapeError(f"anchor size must be a positive int or ALL, got {a!r}")

    @property
    def num_heads(self) -> int:
        return len(self.sizes)

    @classmethod
    def from_sizes(cls, sizes, num_heads: int) -> "AnchorMaskSpec":
        """Distribute an anchor-size list round-robin over ``num_heads``."""
        if not sizes:
            raise ShapeError("anchor size list must be non-empty")
        return cls(tuple(sizes[i % len(sizes)] for i in range(num_heads)))


def anchor_mask(T: int, a) -> np.ndarray:
    """Boolean [T x T] matrix: True where attention is allowed."""
    if T < 1:
        raise ShapeError("anchor_mask requires T >= 1")
    if a is ALL:
        return np.ones((T, T), dtype=bool)
    idx = np.arange(T)
    return np.abs(idx[:, None] - idx[None, :]) <= a


def mask_from_distance(dist: np.ndarray, a) -> np.ndarray:
    if a is ALL:
        return np.ones_like(dist, dtype=bool)
    return dist <= a


def index_distance(T: int) -> np.ndarray:
    idx = np.arange(T, dtype=np.float64)
    return np.abs(idx[:, None] - idx[None, :])


def add_attention_params(ps: ParameterSet, prefix: str, dim: int) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        ps.add(f"{prefix}.{name}", (dim, dim), fan_in=dim)
    for name in ("bq", "bk", "bv", "bo"):
        ps.add(f"{prefix}.{name}", (dim,), fan_in=dim)


def _project(x: Tensor, ps: ParameterSet, prefix: str, name: str) -> Tensor:
    return x @ ps[f"{prefix}.w{name}"] + ps[f"{prefix}.b{name}"]


def _attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    num_heads: int,
    masks: list[np.ndarray] | None,
    collect_weights: list | None = None,
) -> Tensor:
    Tq, D = q.shape
    Tk = k.shape[0]
    if D % num_heads != 0:
        raise ShapeError(f"model dim {D} not divisible by {num_heads} heads")
    dh = D // num_heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.reshape(Tq, num_heads, dh).transpose(1, 0, 2)
    kh = k.reshape(Tk, num_heads, dh).transpose(1, 0, 2)
    vh = v.reshape(Tk, num_heads, dh).transpose(1, 0, 2)
    alpha = (qh @ kh.transpose(0, 2, 1)) * scale
    if masks is not None:
        bias = np.where(np.stack(masks), 0.0, MASK_BIAS)
        alpha = alpha + Tensor(bias)
    w = alpha.softmax(axis=-1)
    if collect_weights is not None:
        collect_weights.extend(w.data.copy())
    return (w @ vh).transpose(1, 0, 2).reshape(Tq, D)


def mhsa_forward(
    x: Tensor,
    ps: ParameterSet,
    prefix: str,
    mask_spec: AnchorMaskSpec,
    dist: np.ndarray | None = None,
    return_weights: bool = False,
):
    """Anchor-masked multi-head self-attention over a [T x D] sequence.

    Scores are scaled by sqrt(D/h); disallowed pairs receive a large
    negative additive bias so their post-softmax weight underflows to
    exactly zero.
    """
    T, D = x.shape
    if dist is None:
        dist = index_distance(T)
    elif dist.shape != (T, T):
        raise ShapeError(f"distance matrix {dist.shape} does not match T={T}")
    masks = [mask_from_distance(dist, a) for a in mask_spec.sizes]
    q = _project(x, ps, prefix, "q")
    k = _project(x, ps, prefix, "k")
    v = _project(x, ps, prefix, "v")
    weights: list | None = [] if return_weights else None
    out = _attend(q, k, v, mask_spec.num_heads, masks, weights)
    out = out @ ps[f"{prefix}.wo"] + ps[f"{prefix}.bo"]
    if return_weights:
        return out, weights
    return out


def cross_attention_forward(
    x: Tensor,
    y: Tensor,
    ps: ParameterSet,
    prefix: str,
    num_heads: int,
    return_weights: bool = False,
):
    """Multi-head attention with queries from ``x`` and keys/values from
    ``y``; no anchor mask (every query sees every key)."""
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"query dim {x.shape[1]} != key dim {y.shape[1]}")
    q = _project(x, ps, prefix, "q")
    k = _project(y, ps, prefix, "k")
    v = _project(y, ps, prefix, "v")
    weights: list | None = [] if return_weights else None
    out = _attend(q, k, v, num_heads, None, weights)
    out = out @ ps[f"{prefix}.wo"] + ps[f"{prefix}.bo"]
    if return_weights:
        return out, weights
    return out


def layer_norm(x: Tensor, ps: ParameterSet, prefix: str) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + LN_EPS).sqrt() * ps[f"{prefix}.g"] + ps[f"{prefix}.b"]


def conv1d_forward(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """1-D cross-correlation along the time axis with same-length output.

    ``x`` is [T x D_in], ``kernel`` is [K x D_in x D_out] with K odd,
    ``bias`` is [D_out]; both ends are zero padded by (K-1)/2.
    """
    if x.ndim != 2 or kernel.ndim != 3:
        raise ShapeError("conv1d expects x [T x D_in] and kernel [K x D_in x D_out]")
    T, d_in = x.shape
    K, kd_in, d_out = kernel.shape
    if K % 2 == 0:
        raise ShapeError(f"kernel size {K} must be odd")
    if kd_in != d_in:
        raise ShapeError(f"kernel D_in {kd_in} != input D_in {d_in}")
    if bias.shape != (d_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({d_out},)")
    pad = (K - 1) // 2
    xp = pad_rows(x, pad, pad)
    out = xp[0:T] @ kernel[0]
    for kk in range(1, K):
        out = out + xp[kk : kk + T] @ kernel[kk]
    return out + bias


def add_encoder_layer_params(
    ps: ParameterSet, prefix: str, dim: int, cross: bool = False
) -> None:
    add_layer_norm(ps, f"{prefix}.ln1", dim)
    add_attention_params(ps, f"{prefix}.attn", dim)
    if cross:
        add_layer_norm(ps, f"{prefix}.lnx", dim)
        add_attention_params(ps, f"{prefix}.xattn", dim)
    add_layer_norm(ps, f"{prefix}.ln2", dim)
    ps.add(f"{prefix}.ffn.w1", (dim, 2 * dim), fan_in=dim)
    ps.add(f"{prefix}.ffn.b1", (2 * dim,), fan_in=dim)
    ps.add(f"{prefix}.ffn.w2", (2 * dim, dim), fan_in=2 * dim)
    ps.add(f"{prefix}.ffn.b2", (dim,), fan_in=2 * dim)


def encoder_layer(
    x: Tensor,
    ps: ParameterSet,
    prefix: str,
    mask_spec: AnchorMaskSpec,
    dist: np.ndarray | None = None,
    query_tokens: Tensor | None = None,
) -> Tensor:
    """Pre-norm residual layer: self-attention, optional cross-attention
    to ``query_tokens``, then a x2-expansion feed-forward."""
    h = layer_norm(x, ps, f"{prefix}.ln1")
    x = x + mhsa_forward(h, ps, f"{prefix}.attn", mask_spec, dist)
    if query_tokens is not None:
        h = layer_norm(x, ps, f"{prefix}.lnx")
        x = x + cross_attention_forward(
            h, query_tokens, ps, f"{prefix}.xattn", mask_spec.num_heads
        )
    h = layer_norm(x, ps, f"{prefix}.ln2")
    h = (h @ ps[f"{prefix}.ffn.w1"] + ps[f"{prefix}.ffn.b1"]).relu()
    return x + (h @ ps[f"{prefix}.ffn.w2"] + ps[f"{prefix}.ffn.b2"])
