import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridssm import numerics as nx
from hybridssm.numerics import Tensor
from hybridssm.ssm import (DtPolicy, ScanError, SsmShape, SsmState, apply_dt_policy, apply_mixing_matrix,
                           init_ssm_params, log_decay, mamba2_block_forward, materialize_mixing_matrix,
                           ssm_scan, ssm_scan_chunked, ssm_scan_sequential)
from hybridssm.verify import gradient_error, random_scan_instance


def scalar_instance(T, x=1.0, B=1.0, C=1.0, dt=1.0, A_log=0.0, D=0.0):
    return (np.full((T, 1, 1), x), np.full((T, 1, 1), B), np.full((T, 1, 1), C), np.full((T, 1), dt),
            np.array([A_log]), np.array([D]))


def test_single_step_matches_matrix():
    x, B, C, dt, A, D = scalar_instance(1)
    y, _ = ssm_scan_sequential(x, B, C, dt, A, D)
    M = materialize_mixing_matrix(B, C, dt, A, D)
    # written then read: y_0 = C B dt x with an empty decay product
    assert y[0, 0, 0] == 1.0
    assert M.shape == (1, 1, 1) and M[0, 0, 0] == 1.0


def test_single_step_matrix_includes_skip():
    rng = np.random.default_rng(0)
    B, C = rng.standard_normal((1, 1, 3)), rng.standard_normal((1, 1, 3))
    M = materialize_mixing_matrix(B, C, np.array([[0.3]]), np.array([0.2]), np.array([0.7]))
    assert abs(M[0, 0, 0] - (C[0, 0] @ B[0, 0] * 0.3 + 0.7)) < 1e-15


def test_pure_integrator():
    c = 0.25
    x, B, C, dt, A, D = scalar_instance(10, x=c, A_log=-60.0)
    y, _ = ssm_scan_sequential(x, B, C, dt, A, D)
    assert np.allclose(y[:, 0, 0], c * np.arange(1, 11), rtol=1e-14)


def test_full_forgetting_leaves_only_diagonal():
    rng = np.random.default_rng(1)
    x, B, C, dt, A, D, _ = random_scan_instance(rng, T=9)
    A = np.full_like(A, 10.0)
    dt = np.maximum(dt, 0.5)
    M = materialize_mixing_matrix(B, C, dt, A, np.zeros_like(D))
    off = M - M * np.eye(9)
    assert np.all(off == 0)
    y, _ = ssm_scan_sequential(x, B, C, dt, A, np.zeros_like(D))
    assert np.max(np.abs(apply_mixing_matrix(M, x) - y)) < 1e-14


@pytest.mark.parametrize("chunk", [1, 97])
def test_degenerate_chunk_sizes(chunk):
    rng = np.random.default_rng(2)
    x, B, C, dt, A, D, r = random_scan_instance(rng, T=97, resets=True)
    y1, s1 = ssm_scan_sequential(x, B, C, dt, A, D, r)
    y2, s2 = ssm_scan_chunked(x, B, C, dt, A, D, r, chunk_size=chunk)
    assert np.max(np.abs(y1 - y2)) < 1e-12
    assert np.max(np.abs(s1.hidden - s2.hidden)) < 1e-12


def test_chunked_t97_chunk16_with_resets_inside_chunks():
    rng = np.random.default_rng(3)
    x, B, C, dt, A, D, _ = random_scan_instance(rng, T=97)
    r = np.zeros(97)
    r[[5, 20, 40, 41, 90]] = 1
    y1, _ = ssm_scan_sequential(x, B, C, dt, A, D, r)
    y2, _ = ssm_scan_chunked(x, B, C, dt, A, D, r, chunk_size=16)
    assert np.max(np.abs(y1 - y2)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), chunk=st.integers(1, 40))
def test_three_way_equivalence(seed, chunk):
    rng = np.random.default_rng(seed)
    x, B, C, dt, A, D, r = random_scan_instance(rng, T=int(rng.integers(1, 60)), batch=(2,))
    y_seq, _ = ssm_scan_sequential(x, B, C, dt, A, D, r)
    y_ch, _ = ssm_scan_chunked(x, B, C, dt, A, D, r, chunk_size=chunk)
    y_m = apply_mixing_matrix(materialize_mixing_matrix(B, C, dt, A, D, r), x)
    assert np.max(np.abs(y_seq - y_ch)) < 1e-9
    assert np.max(np.abs(y_seq - y_m)) < 1e-9


def test_state_handoff_between_calls():
    rng = np.random.default_rng(4)
    x, B, C, dt, A, D, r = random_scan_instance(rng, T=40, resets=True)
    y, _ = ssm_scan_sequential(x, B, C, dt, A, D, r)
    ya, sa = ssm_scan_chunked(x[:17], B[:17], C[:17], dt[:17], A, D, r[:17], chunk_size=5)
    yb, _ = ssm_scan_chunked(x[17:], B[17:], C[17:], dt[17:], A, D, r[17:], init=sa, chunk_size=5)
    assert np.max(np.abs(np.concatenate([ya, yb]) - y)) < 1e-12


def test_reset_factor_bound():
    rng = np.random.default_rng(5)
    x, B, C, dt, A, D, _ = random_scan_instance(rng, T=12)
    r = np.zeros(12)
    r[6] = 1
    M = materialize_mixing_matrix(B, C, dt, A, D, r)
    Bh = np.repeat(B, A.size // B.shape[1], axis=1)
    Ch = np.repeat(C, A.size // C.shape[1], axis=1)
    for t in range(6, 12):
        for s in range(6):
            write = np.abs(np.einsum("hn,hn->h", Ch[t], Bh[s]) * dt[s])
            assert np.all(np.abs(M[:, t, s]) <= math.exp(-80) * write)
    assert math.exp(-80) < 1.9e-35


def test_decay_range():
    rng = np.random.default_rng(6)
    dt = nx.softplus_np(rng.standard_normal((50, 3)))
    A = rng.uniform(-3, 3, 3)
    r = (rng.random(50) < 0.2).astype(float)
    abar = np.exp(log_decay(dt, A, r))
    assert np.all((abar > 0) & (abar < 1))
    assert np.all(abar[r == 1] <= math.exp(-80))


def test_scan_errors():
    x, B, C, dt, A, D = scalar_instance(3)
    with pytest.raises(ValueError, match="positive"):
        ssm_scan_sequential(x, B, C, np.zeros_like(dt), A, D)
    with pytest.raises(ScanError, match="timestep"):
        ssm_scan_sequential(x * 1e300, B * 1e10, C, dt, np.array([-50.0]), D)
    with pytest.raises(ValueError):
        ssm_scan_chunked(x, B, C, dt, A, D, chunk_size=0)
    big = scalar_instance(513)
    with pytest.raises(ValueError, match="refusing"):
        materialize_mixing_matrix(big[1], big[2], big[3], big[4], big[5])


# -- dt policy ------------------------------------------------------------------------------
def test_dt_policy_examples():
    assert apply_dt_policy(0.7, DtPolicy.clip(0.5), 0) == 0.5
    assert apply_dt_policy(0.7, DtPolicy(), 0) == 0.7
    att = DtPolicy.attenuate(0.5, 10)
    assert apply_dt_policy(1.2, att, 10) == 0.6
    assert apply_dt_policy(1.2, att, 11) == 1.2
    att = DtPolicy.attenuate(0.25, 100)
    assert apply_dt_policy(0.8, att, 5) == 0.2
    assert apply_dt_policy(0.8, att, 200) == 0.8
    assert nx.softplus_np(np.array(0.0)) == math.log(2)


@settings(max_examples=50, deadline=None)
@given(dt=st.floats(1e-6, 50), step=st.integers(0, 20))
def test_dt_policy_never_increases(dt, step):
    for pol in (DtPolicy.clip(0.3), DtPolicy.attenuate(0.4, 10), DtPolicy()):
        assert apply_dt_policy(dt, pol, step) <= dt


def test_dt_policy_validation():
    for bad in (lambda: DtPolicy.clip(0.0), lambda: DtPolicy.attenuate(1.0, 5), lambda: DtPolicy("scale")):
        with pytest.raises(ValueError):
            bad()


# -- block -------------------------------------------------------------------------------------
MULTS = {"m_x": 1.0, "m_z": 1.0, "m_B": 1.0, "m_C": 1.0, "m_dt": 1.0, "m_SSM": 1.0}


def make_block(seed=0, d=32, shape=SsmShape(n_heads=2, d_head=8, d_state=8, conv_k=4, chunk_size=3)):
    rng = np.random.default_rng(seed)
    stds = {k: 1 / math.sqrt(d) for k in ("W_x", "W_z", "W_B", "W_C", "W_dt")}
    stds["W_out"] = 1 / math.sqrt(shape.d_ssm)
    return init_ssm_params(rng, d, shape, stds), rng


def test_block_shape_and_init():
    p, rng = make_block()
    y = mamba2_block_forward(Tensor(rng.standard_normal((8, 32))), p, MULTS)
    assert y.shape == (8, 32)
    assert np.allclose(np.exp(p.A_log.data), [1, 16])
    assert np.allclose(nx.softplus_np(p.b_dt.data), [1e-3, 0.1])
    assert np.all(np.abs(p.conv_kernel.data) <= 0.5)


def test_block_state_passing_matches_full_sequence():
    p, rng = make_block(1)
    u = rng.standard_normal((2, 20, 32))
    r = np.zeros(20)
    r[[0, 9]] = 1
    full = mamba2_block_forward(Tensor(u), p, MULTS, resets=r).data
    a, st_a = mamba2_block_forward(Tensor(u[:, :7]), p, MULTS, resets=r[:7], return_state=True)
    b = mamba2_block_forward(Tensor(u[:, 7:]), p, MULTS, resets=r[7:], state=st_a)
    assert np.max(np.abs(np.concatenate([a.data, b.data], axis=1) - full)) < 1e-12


def test_block_reset_isolates_documents():
    p, rng = make_block(2)
    u = rng.standard_normal((16, 32))
    r = np.zeros(16)
    r[[0, 6]] = 1
    packed = mamba2_block_forward(Tensor(u), p, MULTS, resets=r).data
    alone = mamba2_block_forward(Tensor(u[6:]), p, MULTS).data
    assert np.max(np.abs(packed[6:] - alone)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_block_gradients(seed):
    p, rng = make_block(seed, d=10, shape=SsmShape(n_heads=2, d_head=2, d_state=3, n_groups=2, conv_k=3, chunk_size=4))
    u = Tensor(rng.standard_normal((7, 10)), requires_grad=True)
    r = np.zeros(7)
    r[3] = 1
    w = rng.standard_normal((7, 10))
    build = lambda: (mamba2_block_forward(u, p, MULTS, policy=DtPolicy.clip(0.05), resets=r) * Tensor(w)).sum()
    params = {**p.tensors(), "u": u}
    assert gradient_error(build, params, rng, n_coords=8) < 1e-4


def test_scan_op_gradients_batched():
    rng = np.random.default_rng(9)
    x, B, C, dt, A, D, r = random_scan_instance(rng, T=11, resets=True, batch=(2,))
    ts = {k: Tensor(v, requires_grad=True) for k, v in dict(x=x, B=B, C=C, dt=dt, A=A, D=D).items()}
    w = rng.standard_normal(x.shape)
    build = lambda: (ssm_scan(ts["x"], ts["B"], ts["C"], ts["dt"], ts["A"], ts["D"], r, chunk_size=4)[0] * Tensor(w)).sum()
    assert gradient_error(build, ts, rng, n_coords=10) < 1e-6


def test_state_zeros_shapes():
    s = SsmState.zeros((2,), 3, 4, 5, conv_k=4, channels=7)
    assert s.hidden.shape == (2, 3, 4, 5) and s.conv_tail.shape == (2, 3, 7)


def test_shape_validation():
    with pytest.raises(ValueError):
        SsmShape(n_heads=3, d_head=4, d_state=4, n_groups=2)
    with pytest.raises(ValueError):
        SsmShape(n_heads=2, d_head=4, d_state=4, conv_k=0)
