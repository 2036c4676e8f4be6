"""Grouped-query attention with rotary positions and per-document masking.

There is no separate 1/sqrt(d_head) factor: the key multiplier m_key carries it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class RopeSpec:
    base: float = 1e4
    d_head: int = 64

    def __post_init__(self):
        if self.base < 1:
            raise ValueError("RoPE base must be >= 1")


@dataclass(frozen=True)
class AttnShape:
    n_q_heads: int
    n_kv_heads: int
    d_head: int
    rope_base: float = 1e4

    def __post_init__(self):
        if self.n_q_heads % self.n_kv_heads:
            raise ValueError(f"n_kv_heads={self.n_kv_heads} must divide n_q_heads={self.n_q_heads}")
        if self.d_head % 2:
            raise ValueError("attention d_head must be even for RoPE")

    @property
    def d_attn(self) -> int:
        return self.n_q_heads * self.d_head

    @property
    def rope(self) -> RopeSpec:
        return RopeSpec(self.rope_base, self.d_head)


@dataclass
class AttnParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W_attn: Tensor
    shape: AttnShape = field(compare=False)

    def tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Tensor)}


def init_attn_params(rng: np.random.Generator, d_model: int, shape: AttnShape,
                     stds: Mapping[str, float], dtype=np.float64) -> AttnParams:
    kv = shape.n_kv_heads * shape.d_head

    def gauss(name, rows, cols):
        return Tensor(rng.standard_normal((rows, cols)) * stds[name], requires_grad=True, dtype=dtype)

    return AttnParams(
        W_Q=gauss("W_Q", shape.d_attn, d_model),
        W_K=gauss("W_K", kv, d_model),
        W_V=gauss("W_V", kv, d_model),
        W_attn=gauss("W_attn", d_model, shape.d_attn),
        shape=shape,
    )


def rope_frequencies(spec: RopeSpec) -> np.ndarray:
    if spec.d_head % 2:
        raise ValueError(f"RoPE needs an even head dim, got {spec.d_head}")
    k = np.arange(spec.d_head // 2)
    return float(spec.base) ** (-2.0 * k / spec.d_head)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # pairs are adjacent channels (2k, 2k+1)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _angles(positions, spec: RopeSpec):
    positions = np.asarray(positions)
    if np.any(positions < 0):
        raise ValueError("positions must be non-negative")
    ang = positions[..., None].astype(np.float64) * rope_frequencies(spec)   # [..., T, d/2]
    return np.cos(ang)[..., None, :], np.sin(ang)[..., None, :]             # broadcast over heads


def rope_rotate(x: Tensor, positions, spec: RopeSpec) -> Tensor:
    """Rotate head vectors x [..., T, heads, d_head] by position * theta_k."""
    cos, sin = _angles(positions, spec)
    cos, sin = cos.astype(x.dtype), sin.astype(x.dtype)
    return nx.custom_op((x,), _rotate(x.data, cos, sin), lambda g: (_rotate(g, cos, -sin),), "rope")


def apply_rope(q, k, positions, spec: RopeSpec):
    """Rotate queries and keys; accepts arrays or Tensors."""
    if isinstance(q, Tensor):
        return rope_rotate(q, positions, spec), rope_rotate(k, positions, spec)
    cos, sin = _angles(positions, spec)
    return _rotate(np.asarray(q), cos, sin), _rotate(np.asarray(k), cos, sin)


def document_mask(doc_ids) -> np.ndarray:
    """allowed[..., t, s] = s <= t and doc_ids[s] == doc_ids[t]."""
    doc_ids = np.asarray(doc_ids)
    if np.any(np.diff(doc_ids, axis=-1) < 0):
        raise ValueError("doc_ids must be non-decreasing along the sequence")
    T = doc_ids.shape[-1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    return causal & (doc_ids[..., :, None] == doc_ids[..., None, :])


def gqa_attention(u: Tensor, params: AttnParams, mults: Mapping[str, float],
                  doc_ids=None, positions=None) -> Tensor:
    """u [..., T, d] -> [..., T, d]."""
    s = params.shape
    T = u.shape[-2]
    lead = u.shape[:-2]
    if doc_ids is None:
        doc_ids = np.zeros(T, dtype=np.int64)
    if positions is None:
        positions = positions_from_doc_ids(doc_ids)
    q = nx.linear(u, params.W_Q).reshape(*lead, T, s.n_q_heads, s.d_head)
    k = (nx.linear(u, params.W_K) * mults["m_key"]).reshape(*lead, T, s.n_kv_heads, s.d_head)
    v = nx.linear(u, params.W_V).reshape(*lead, T, s.n_kv_heads, s.d_head)
    q, k = apply_rope(q, k, positions, s.rope)
    rep = s.n_q_heads // s.n_kv_heads
    if rep > 1:
        k = nx.repeat_axis(k, rep, axis=-2)
        v = nx.repeat_axis(v, rep, axis=-2)
    q, k, v = (nx.swapaxes(a, -2, -3) for a in (q, k, v))          # [..., heads, T, d_head]
    scores = nx.matmul(q, nx.swapaxes(k, -1, -2))                   # [..., heads, T, T]
    allowed = document_mask(doc_ids)[..., None, :, :]
    probs = nx.masked_softmax(scores, allowed)
    ctx = nx.swapaxes(nx.matmul(probs, v), -2, -3).reshape(*lead, T, s.d_attn)
    return nx.linear(ctx, params.W_attn) * mults["m_attn"]


def positions_from_doc_ids(doc_ids) -> np.ndarray:
    """Offset of each token from the first token of its document within the sequence."""
    doc_ids = np.asarray(doc_ids)
    T = doc_ids.shape[-1]
    start = np.ones(doc_ids.shape, dtype=bool)
    start[..., 1:] = doc_ids[..., 1:] != doc_ids[..., :-1]
    idx = np.where(start, np.arange(T), 0)
    return np.arange(T) - np.maximum.accumulate(idx, axis=-1)
