"""Post-norm Transformer encoder layer with per-head projections."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "ConfigurationError",
    "EncoderLayerParams",
    "make_causal_mask",
    "multi_head_attention",
    "attention_weights",
    "feed_forward",
    "encoder_layer_forward",
]


class ConfigurationError(ValueError):
    """Model dimensions are inconsistent."""


@dataclass
class EncoderLayerParams:
    """Weights of one encoder layer.

    ``w_q``, ``w_k`` and ``w_v`` hold one ``d x d_h`` matrix per head.
    """

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_a: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln1_gain: Tensor
    ln1_shift: Tensor
    ln2_gain: Tensor
    ln2_shift: Tensor

    def __post_init__(self):
        heads = len(self.w_q)
        if heads == 0 or len(self.w_k) != heads or len(self.w_v) != heads:
            raise ConfigurationError("need the same positive number of Q/K/V heads")
        d = self.w_a.shape[0]
        if d % heads:
            raise ConfigurationError(f"{heads} heads do not divide d={d}")
        d_h = d // heads
        for w in (*self.w_q, *self.w_k, *self.w_v):
            if w.shape != (d, d_h):
                raise ConfigurationError(f"head projection must be {(d, d_h)}, got {w.shape}")

    @property
    def heads(self) -> int:
        return len(self.w_q)

    @property
    def d(self) -> int:
        return self.w_a.shape[0]

    @classmethod
    def from_store(cls, store: dict[str, Tensor], prefix: str, heads: int) -> "EncoderLayerParams":
        return cls(
            w_q=[store[f"{prefix}.w_q.{h}"] for h in range(heads)],
            w_k=[store[f"{prefix}.w_k.{h}"] for h in range(heads)],
            w_v=[store[f"{prefix}.w_v.{h}"] for h in range(heads)],
            w_a=store[f"{prefix}.w_a"],
            w_1=store[f"{prefix}.w_1"],
            b_1=store[f"{prefix}.b_1"],
            w_2=store[f"{prefix}.w_2"],
            b_2=store[f"{prefix}.b_2"],
            ln1_gain=store[f"{prefix}.ln1_gain"],
            ln1_shift=store[f"{prefix}.ln1_shift"],
            ln2_gain=store[f"{prefix}.ln2_gain"],
            ln2_shift=store[f"{prefix}.ln2_shift"],
        )


def make_causal_mask(n: int) -> np.ndarray:
    """Boolean ``n x n`` mask, True where key ``j <= i`` is visible to query ``i``."""
    if n < 1:
        raise ValueError("mask size must be >= 1")
    return np.tril(np.ones((n, n), dtype=bool))


def _split_heads(z: Tensor, mats: list[Tensor]) -> Tensor:
    # (..., n, d) -> (..., H, n, d_h), one fused matmul over all heads
    w = ad.concat(mats, axis=1)
    proj = ad.matmul(z, w)
    *lead, n, _ = proj.shape
    heads, d_h = len(mats), mats[0].shape[1]
    proj = ad.reshape(proj, (*lead, n, heads, d_h))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return ad.transpose(proj, axes)


def attention_weights(z: Tensor, p: EncoderLayerParams, mask=None) -> Tensor:
    """Per-head attention probabilities, shape ``(..., H, n, n)``."""
    q = _split_heads(z, p.w_q)
    k = _split_heads(z, p.w_k)
    d_h = p.d // p.heads
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(d_h))
    return ad.masked_softmax(scores, mask)


def multi_head_attention(z: Tensor, p: EncoderLayerParams, mask=None) -> Tensor:
    """Concatenate ``softmax(Q_h K_h^T / sqrt(d_h)) V_h`` over heads, then apply ``W_A``."""
    z = ad._as_tensor(z)
    if z.shape[-1] != p.d:
        raise ad.DimensionError(f"input width {z.shape[-1]} != d={p.d}")
    attn = attention_weights(z, p, mask)
    v = _split_heads(z, p.w_v)
    heads = ad.matmul(attn, v)  # (..., H, n, d_h)
    nlead = heads.ndim - 3
    axes = tuple(range(nlead)) + (nlead + 1, nlead, nlead + 2)
    merged = ad.transpose(heads, axes)
    *lead, n, _, _ = merged.shape
    merged = ad.reshape(merged, (*lead, n, p.d))
    return ad.matmul(merged, p.w_a)


def feed_forward(x: Tensor, p: EncoderLayerParams) -> Tensor:
    hidden = ad.gelu(ad.matmul(x, p.w_1) + p.b_1)
    return ad.matmul(hidden, p.w_2) + p.b_2


def encoder_layer_forward(z: Tensor, p: EncoderLayerParams, mask=None,
                          dropout_rate: float = 0.0,
                          rng: np.random.Generator | None = None) -> Tensor:
    """``O_r = LN(z + MHA(z))``; ``O = LN(O_r + FFN(O_r))``.

    Dropout (training only) is applied to the FFN output before the
    second residual add.
    """
    z = ad._as_tensor(z)
    o_r = ad.layer_norm(z + multi_head_attention(z, p, mask), p.ln1_gain, p.ln1_shift)
    ffn = ad.dropout(feed_forward(o_r, p), dropout_rate, rng)
    return ad.layer_norm(o_r + ffn, p.ln2_gain, p.ln2_shift)
