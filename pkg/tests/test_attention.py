import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridssm.attention import (AttnShape, RopeSpec, apply_rope, document_mask, gqa_attention, init_attn_params,
                                 positions_from_doc_ids, rope_frequencies)
from hybridssm.numerics import Tensor
from hybridssm.verify import gradient_error

MULTS = {"m_key": 0.5, "m_attn": 1.5}


def make(seed=0, d=16, n_q=4, n_kv=2, d_head=4, base=1e4):
    rng = np.random.default_rng(seed)
    shape = AttnShape(n_q, n_kv, d_head, base)
    p = init_attn_params(rng, d, shape, {k: 0.4 for k in ("W_Q", "W_K", "W_V", "W_attn")})
    return p, rng


def brute_force(u, p, mults, doc_ids):
    """Plain multi-head attention with each KV head copied for its query group, position by position."""
    s = p.shape
    T = u.shape[0]
    rep = s.n_q_heads // s.n_kv_heads
    pos = positions_from_doc_ids(doc_ids)
    theta = rope_frequencies(s.rope)
    q = (u @ p.W_Q.data.T).reshape(T, s.n_q_heads, s.d_head)
    k = (u @ p.W_K.data.T * mults["m_key"]).reshape(T, s.n_kv_heads, s.d_head)
    v = (u @ p.W_V.data.T).reshape(T, s.n_kv_heads, s.d_head)

    def rot(vec, n):
        out = vec.copy()
        for j, th in enumerate(theta):
            c, sn = math.cos(n * th), math.sin(n * th)
            a, b = vec[2 * j], vec[2 * j + 1]
            out[2 * j], out[2 * j + 1] = a * c - b * sn, a * sn + b * c
        return out

    ctx = np.zeros((T, s.n_q_heads, s.d_head))
    for h in range(s.n_q_heads):
        kv = h // rep
        for t in range(T):
            allowed = [j for j in range(t + 1) if doc_ids[j] == doc_ids[t]]
            sc = np.array([rot(q[t, h], pos[t]) @ rot(k[j, kv], pos[j]) for j in allowed])
            w = np.exp(sc - sc.max())
            w /= w.sum()
            ctx[t, h] = sum(wi * v[j, kv] for wi, j in zip(w, allowed))
    return ctx.reshape(T, -1) @ p.W_attn.data.T * mults["m_attn"]


def test_rope_frequencies():
    assert rope_frequencies(RopeSpec(123.0, 8))[0] == 1.0
    th = rope_frequencies(RopeSpec(1e11, 4))
    assert th[0] == 1.0 and abs(th[1] - 1e11 ** -0.5) < 1e-20 and abs(th[1] - 3.1623e-6) < 1e-10
    assert rope_frequencies(RopeSpec(1e4, 64))[31] == 1e4 ** (-62 / 64)
    with pytest.raises(ValueError):
        rope_frequencies(RopeSpec(1e4, 5))
    with pytest.raises(ValueError):
        RopeSpec(0.5, 4)


def test_rope_identity_at_zero_and_isometry():
    rng = np.random.default_rng(0)
    q, k = rng.standard_normal((2, 5, 3, 8))
    spec = RopeSpec(1e4, 8)
    q0, k0 = apply_rope(q[:1], k[:1], np.zeros(1, int), spec)
    assert np.array_equal(q0, q[:1]) and np.array_equal(k0, k[:1])
    qr, _ = apply_rope(q, k, np.arange(5) * 37, spec)
    assert np.allclose(np.linalg.norm(qr, axis=-1), np.linalg.norm(q, axis=-1), rtol=1e-14)


def test_rope_relative_positions():
    rng = np.random.default_rng(1)
    spec = RopeSpec(1e11, 16)
    rot = lambda v, n: apply_rope(v[None, None], v[None, None], np.array([n]), spec)[0].reshape(-1)
    for _ in range(20):
        q, k = rng.standard_normal((2, 16))
        m, n, delta = (int(i) for i in rng.integers(0, 5000, 3))
        a = rot(q, m) @ rot(k, n)
        b = rot(q, m + delta) @ rot(k, n + delta)
        assert abs(a - b) < 1e-9 * (1 + abs(a))


def test_single_token_is_value_projection():
    p, rng = make(2)
    u = rng.standard_normal((1, 16))
    y = gqa_attention(Tensor(u), p, MULTS).data
    v = u @ p.W_V.data.T
    v_full = np.repeat(v.reshape(1, 2, 4), 2, axis=1).reshape(1, -1)
    assert np.allclose(y, v_full @ p.W_attn.data.T * MULTS["m_attn"], rtol=1e-14, atol=0)


@pytest.mark.parametrize("seed", range(4))
def test_matches_expanded_brute_force(seed):
    p, rng = make(seed, base=[1e4, 1e11][seed % 2])
    T = 9
    doc = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2])
    u = rng.standard_normal((T, 16))
    y = gqa_attention(Tensor(u), p, MULTS, doc).data
    assert np.max(np.abs(y - brute_force(u, p, MULTS, doc))) < 1e-12


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), T=st.integers(2, 24))
def test_packed_equals_per_document(seed, T):
    p, rng = make(seed)
    u = rng.standard_normal((T, 16))
    cuts = np.sort(rng.choice(np.arange(1, T), size=min(T - 1, 2), replace=False))
    doc = np.zeros(T, int)
    for c in cuts:
        doc[c:] += 1
    packed = gqa_attention(Tensor(u), p, MULTS, doc).data
    bounds = [0, *cuts, T]
    sep = np.concatenate([gqa_attention(Tensor(u[a:b]), p, MULTS).data for a, b in zip(bounds[:-1], bounds[1:])])
    assert np.max(np.abs(packed - sep)) < 1e-12


def test_mask_rows_and_errors():
    doc = np.array([0, 0, 1, 1, 1, 2])
    m = document_mask(doc)
    assert m.sum(axis=1).tolist() == [1, 2, 1, 2, 3, 1]
    assert not np.any(np.triu(m, 1))
    with pytest.raises(ValueError):
        document_mask(np.array([0, 1, 0]))
    assert positions_from_doc_ids(doc).tolist() == [0, 1, 0, 1, 2, 0]


@pytest.mark.parametrize("seed", range(3))
def test_attention_gradients(seed):
    p, rng = make(seed)
    u = Tensor(rng.standard_normal((6, 16)), requires_grad=True)
    doc = np.array([0, 0, 0, 1, 1, 1])
    w = rng.standard_normal((6, 16))
    build = lambda: (gqa_attention(u, p, MULTS, doc) * Tensor(w)).sum()
    assert gradient_error(build, {**p.tensors(), "u": u}, rng, n_coords=8) < 1e-4


def test_shape_validation():
    with pytest.raises(ValueError):
        AttnShape(6, 4, 8)
    with pytest.raises(ValueError):
        AttnShape(4, 2, 7)
