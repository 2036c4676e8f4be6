"""Mamba2-style selective state-space mixer.

Shapes used throughout (leading ``...`` is any batch prefix):

    x   [..., T, H, P]   per-head inputs (P = head dim)
    B,C [..., T, G, N]   write / read projectors, shared by H // G heads
    dt  [..., T, H]      positive step sizes (post-softplus, post-policy)
    A_log, D  [H]
    resets [..., T]      1 where a token opens a new document

Recurrence (state written first, then read, so M_tt carries dt_t with an empty product):

    Abar_t = exp(-exp(A_log) * dt_t - 80 * r_t)
    h_t    = Abar_t * h_{t-1} + dt_t * x_t B_t^T
    y_t    = h_t C_t + D x_t
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor

RESET_BIAS = -80.0
MAX_MATERIALIZE = 512


class ScanError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DtPolicy:
    mode: str = "none"
    dt_max: float | None = None
    alpha: float | None = None
    k_steps: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "clip", "attenuate"):
            raise ValueError(f"unknown dt policy {self.mode!r}")
        if self.mode == "clip" and not (self.dt_max is not None and self.dt_max > 0):
            raise ValueError("clip policy needs dt_max > 0")
        if self.mode == "attenuate" and not (self.alpha is not None and 0 < self.alpha < 1):
            raise ValueError("attenuate policy needs 0 < alpha < 1")

    @classmethod
    def clip(cls, dt_max: float) -> "DtPolicy":
        return cls("clip", dt_max=dt_max)

    @classmethod
    def attenuate(cls, alpha: float, k_steps: int) -> "DtPolicy":
        return cls("attenuate", alpha=alpha, k_steps=k_steps)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "dt_max": self.dt_max, "alpha": self.alpha, "k_steps": self.k_steps}


def apply_dt_policy(dt, policy: DtPolicy, step: int):
    """Clip to dt_max, scale by alpha while step <= k_steps, or pass through.

    Works on plain arrays and on Tensors (keeping the tape intact).
    """
    if policy.mode == "clip":
        if isinstance(dt, Tensor):
            return nx.minimum(dt, policy.dt_max)
        return np.minimum(dt, policy.dt_max)
    if policy.mode == "attenuate" and step <= policy.k_steps:
        return dt * policy.alpha
    return dt


@dataclass
class SsmState:
    """Hand-off between consecutive chunks of one stream."""

    hidden: np.ndarray                 # [..., H, P, N]
    conv_tail: np.ndarray | None = None  # [..., k-1, channels]

    @classmethod
    def zeros(cls, lead: tuple, n_heads: int, d_head: int, d_state: int,
              conv_k: int = 1, channels: int = 0, dtype=np.float64) -> "SsmState":
        tail = np.zeros((*lead, conv_k - 1, channels), dtype=dtype) if channels else None
        return cls(np.zeros((*lead, n_heads, d_head, d_state), dtype=dtype), tail)


# -- scan kernels ------------------------------------------------------------------------
def _expand_groups(B: np.ndarray, n_heads: int) -> np.ndarray:
    g = B.shape[-2]
    if n_heads % g:
        raise ValueError(f"{g} groups do not divide {n_heads} heads")
    return np.repeat(B, n_heads // g, axis=-2)


def _reset_array(resets, lead_t: tuple, dtype) -> np.ndarray:
    if resets is None:
        return np.zeros(lead_t, dtype=dtype)
    r = np.asarray(resets, dtype=dtype)
    return np.broadcast_to(r, lead_t)


def log_decay(dt: np.ndarray, A_log: np.ndarray, resets=None) -> np.ndarray:
    """log Abar = -exp(A_log) dt - 80 r, shape [..., T, H]."""
    r = _reset_array(resets, dt.shape[:-1], dt.dtype)
    return -np.exp(A_log) * dt + RESET_BIAS * r[..., None]


def _check_inputs(x, B, C, dt, A_log, D):
    if np.any(dt <= 0):
        raise ValueError("dt must be strictly positive")
    T, H = dt.shape[-2:]
    if x.shape[-3:-1] != (T, H) or B.shape != C.shape or B.shape[-3] != T:
        raise nx.ShapeError(f"inconsistent scan shapes x{x.shape} B{B.shape} C{C.shape} dt{dt.shape}")
    if A_log.shape != (H,) or D.shape != (H,):
        raise nx.ShapeError("A_log and D must be per-head vectors")
    for name, arr in (("x", x), ("B", B), ("C", C), ("A_log", A_log), ("D", D)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in {name}")


def _init_hidden(init, x, N):
    lead = x.shape[:-3]
    H, P = x.shape[-2:]
    if init is None:
        return np.zeros((*lead, H, P, N), dtype=x.dtype)
    hidden = init.hidden if isinstance(init, SsmState) else np.asarray(init)
    return np.broadcast_to(hidden, (*lead, H, P, N)).astype(x.dtype, copy=True)


def ssm_scan_sequential(x, B, C, dt, A_log, D, resets=None, init=None):
    """Step-by-step recurrence; returns (y, final SsmState)."""
    x, B, C, dt = (np.asarray(a) for a in (x, B, C, dt))
    A_log, D = np.asarray(A_log), np.asarray(D)
    _check_inputs(x, B, C, dt, A_log, D)
    H = dt.shape[-1]
    Bh, Ch = _expand_groups(B, H), _expand_groups(C, H)
    abar = np.exp(log_decay(dt, A_log, resets))
    h = _init_hidden(init, x, B.shape[-1])
    y = np.empty_like(x)
    for t in range(x.shape[-3]):
        with np.errstate(over="ignore", invalid="ignore"):
            h = abar[..., t, :, None, None] * h + (dt[..., t, :, None, None] * x[..., t, :, :, None]) * Bh[..., t, :, None, :]
        if not np.all(np.isfinite(h)):
            raise ScanError(f"non-finite SSM state at timestep {t}")
        y[..., t, :, :] = np.einsum("...hpn,...hn->...hp", h, Ch[..., t, :, :]) + D[:, None] * x[..., t, :, :]
    tail = init.conv_tail if isinstance(init, SsmState) else None
    return y, SsmState(h, tail)


def _chunk(x, Bh, Ch, dt, la, D, h):
    cum = np.cumsum(la, axis=-2)                              # [..., L, H]
    L = cum.shape[-2]
    tri = np.tril(np.ones((L, L), dtype=bool))[..., None]     # [t, s, 1]
    diff = cum[..., :, None, :] - cum[..., None, :, :]        # [..., t, s, H]
    decay = np.where(tri, np.exp(np.where(tri, diff, 0.0)), 0.0)
    cb = np.einsum("...thn,...shn->...tsh", Ch, Bh)
    w = cb * decay * dt[..., None, :, :]
    y = np.einsum("...tsh,...shp->...thp", w, x)
    y += np.exp(cum)[..., None] * np.einsum("...hpn,...thn->...thp", h, Ch)
    y += D[:, None] * x
    to_end = np.exp(cum[..., -1:, :] - cum) * dt              # [..., L, H]
    h = np.exp(cum[..., -1, :])[..., None, None] * h + np.einsum("...sh,...shp,...shn->...hpn", to_end, x, Bh)
    return y, h


def ssm_scan_chunked(x, B, C, dt, A_log, D, resets=None, init=None, chunk_size: int = 64):
    """Same contract as the sequential scan, computed block-wise.

    Inside a chunk the mixing weights come from a segment-sum of log-decays; between
    chunks only the hidden state is carried.
    """
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    x, B, C, dt = (np.asarray(a) for a in (x, B, C, dt))
    A_log, D = np.asarray(A_log), np.asarray(D)
    _check_inputs(x, B, C, dt, A_log, D)
    H, T = dt.shape[-1], dt.shape[-2]
    Bh, Ch = _expand_groups(B, H), _expand_groups(C, H)
    la = log_decay(dt, A_log, resets)
    h = _init_hidden(init, x, B.shape[-1])
    ys = []
    for start in range(0, T, chunk_size):
        sl = slice(start, min(start + chunk_size, T))
        y, h = _chunk(x[..., sl, :, :], Bh[..., sl, :, :], Ch[..., sl, :, :], dt[..., sl, :], la[..., sl, :], D, h)
        if not np.all(np.isfinite(h)):
            raise ScanError(f"non-finite SSM state in chunk ending at timestep {sl.stop - 1}")
        ys.append(y)
    tail = init.conv_tail if isinstance(init, SsmState) else None
    return np.concatenate(ys, axis=-3), SsmState(h, tail)


def materialize_mixing_matrix(B, C, dt, A_log, D, resets=None, max_len: int = MAX_MATERIALIZE):
    """Per-head causal mixing matrix M [..., H, T, T] with y_t = sum_s M_ts x_s.

    Decay products are accumulated multiplicatively, one factor at a time; this is the
    verification oracle for both scans and refuses long sequences.
    """
    B, C, dt = (np.asarray(a) for a in (B, C, dt))
    A_log, D = np.asarray(A_log), np.asarray(D)
    T, H = dt.shape[-2:]
    if T > max_len:
        raise ValueError(f"refusing to materialise a {T}x{T} mixing matrix (limit {max_len})")
    Bh, Ch = _expand_groups(B, H), _expand_groups(C, H)
    r = _reset_array(resets, dt.shape[:-1], dt.dtype)
    abar = np.exp(-np.exp(A_log) * dt + RESET_BIAS * r[..., None])   # [..., T, H]
    abar = np.moveaxis(abar, -1, -2)                                   # [..., H, T]
    lead = dt.shape[:-2]
    prod = np.zeros((*lead, H, T, T), dtype=dt.dtype)
    for t in range(T):
        if t > 0:
            prod[..., t, :t] = prod[..., t - 1, :t] * abar[..., t, None]
        prod[..., t, t] = 1.0
    cb = np.einsum("...thn,...shn->...hts", Ch, Bh)
    M = cb * prod * np.moveaxis(dt, -1, -2)[..., None, :]
    M = M + D[:, None, None] * np.eye(T, dtype=dt.dtype)
    return M


def apply_mixing_matrix(M, x):
    """y[..., t, h, p] = sum_s M[..., h, t, s] x[..., s, h, p]."""
    return np.einsum("...hts,...shp->...thp", M, x)


# -- differentiable scan -------------------------------------------------------------------
def ssm_scan(x: Tensor, B: Tensor, C: Tensor, dt: Tensor, A_log: Tensor, D: Tensor,
             resets=None, init: SsmState | None = None, chunk_size: int = 64):
    """Tape-aware scan: chunked forward, sequential adjoint. Returns (y Tensor, SsmState)."""
    y, final = ssm_scan_chunked(x.data, B.data, C.data, dt.data, A_log.data, D.data,
                                resets=resets, init=init, chunk_size=chunk_size)
    H, G = dt.shape[-1], B.shape[-2]
    rep = H // G

    def bw(gy):
        xd, dtd, Ad, Dd = x.data, dt.data, A_log.data, D.data
        Bh, Ch = _expand_groups(B.data, H), _expand_groups(C.data, H)
        ea = np.exp(Ad)
        abar = np.exp(log_decay(dtd, Ad, resets))
        T = xd.shape[-3]
        hs = np.empty((T + 1, *final.hidden.shape), dtype=xd.dtype)
        hs[0] = _init_hidden(init, xd, B.shape[-1])
        for t in range(T):
            hs[t + 1] = abar[..., t, :, None, None] * hs[t] + (dtd[..., t, :, None, None] * xd[..., t, :, :, None]) * Bh[..., t, :, None, :]
        gx = np.empty_like(xd)
        gBh = np.empty_like(Bh)
        gCh = np.empty_like(Ch)
        gdt = np.empty_like(dtd)
        gA = np.zeros_like(Ad)
        gh = np.zeros_like(hs[0])
        lead_axes = tuple(range(xd.ndim - 3))
        for t in range(T - 1, -1, -1):
            gyt = gy[..., t, :, :]
            gh = gh + gyt[..., None] * Ch[..., t, :, None, :]
            gCh[..., t, :, :] = np.einsum("...hpn,...hp->...hn", hs[t + 1], gyt)
            gx[..., t, :, :] = dtd[..., t, :, None] * np.einsum("...hpn,...hn->...hp", gh, Bh[..., t, :, :]) + Dd[:, None] * gyt
            gBh[..., t, :, :] = dtd[..., t, :, None] * np.einsum("...hpn,...hp->...hn", gh, xd[..., t, :, :])
            g_abar = np.einsum("...hpn,...hpn->...h", gh, hs[t])
            gdt[..., t, :] = (np.einsum("...hpn,...hp,...hn->...h", gh, xd[..., t, :, :], Bh[..., t, :, :])
                              - g_abar * ea * abar[..., t, :])
            gA -= (g_abar * ea * dtd[..., t, :] * abar[..., t, :]).sum(axis=lead_axes)
            gh = gh * abar[..., t, :, None, None]
        gD = (gy * xd).reshape(-1, H, xd.shape[-1]).sum(axis=(0, 2))
        red = lambda g: g.reshape(*g.shape[:-2], G, rep, g.shape[-1]).sum(axis=-2)
        return gx, red(gBh), red(gCh), gdt, gA, gD

    out = nx.custom_op((x, B, C, dt, A_log, D), y, bw, "ssm_scan")
    return out, final


# -- causal depthwise convolution with document masking ----------------------------------
def _steps_since_reset(resets, lead_t: tuple) -> np.ndarray:
    """Distance to the latest reset at or before t within the chunk (large if none)."""
    T = lead_t[-1]
    r = _reset_array(resets, lead_t, np.float64) > 0
    idx = np.where(r, np.arange(T), -1)
    last = np.maximum.accumulate(idx, axis=-1)
    return np.where(last >= 0, np.arange(T) - last, np.iinfo(np.int64).max // 2)


def causal_conv1d(u: Tensor, weight: Tensor, bias: Tensor, resets=None, tail: np.ndarray | None = None):
    """Depthwise causal conv over time; taps never reach across a document reset.

    weight is [channels, k] with weight[:, k-1] applied to the current step. ``tail`` holds
    the previous k-1 inputs (already zeroed where they belong to an earlier document).
    Returns (out Tensor, next tail).
    """
    C, k = weight.shape
    T = u.shape[-2]
    lead = u.shape[:-2]
    if tail is None:
        tail = np.zeros((*lead, k - 1, C), dtype=u.dtype)
    tail = np.broadcast_to(tail, (*lead, k - 1, C))
    U = np.concatenate([tail, u.data], axis=-2)
    since = _steps_since_reset(resets, (*lead, T))
    masks = [(since >= j)[..., None] for j in range(k)]
    out = np.broadcast_to(bias.data, (*lead, T, C)).copy()
    for j in range(k):
        out += weight.data[:, k - 1 - j] * U[..., k - 1 - j:k - 1 - j + T, :] * masks[j]

    def bw(g):
        gU = np.zeros_like(U)
        gw = np.zeros_like(weight.data)
        flat_axes = tuple(range(g.ndim - 1))
        for j in range(k):
            gm = g * masks[j]
            gU[..., k - 1 - j:k - 1 - j + T, :] += gm * weight.data[:, k - 1 - j]
            gw[:, k - 1 - j] = (gm * U[..., k - 1 - j:k - 1 - j + T, :]).sum(axis=flat_axes)
        return gU[..., k - 1:, :], gw, g.sum(axis=flat_axes)

    new_tail = U[..., U.shape[-2] - (k - 1):, :].copy()
    if k > 1 and resets is not None:
        r = _reset_array(resets, (*lead, T), np.float64) > 0
        pos = np.where(r, np.arange(T), -1).max(axis=-1)    # last reset in this chunk
        # tail entry i sits at timestep T-(k-1)+i of the chunk
        tpos = T - (k - 1) + np.arange(k - 1)
        keep = tpos[None, :] >= pos.reshape(-1, 1)
        new_tail = new_tail * keep.reshape(*lead, k - 1, 1)
    return nx.custom_op((u, weight, bias), out, bw, "conv1d"), new_tail


# -- block ------------------------------------------------------------------------------
@dataclass(frozen=True)
class SsmShape:
    n_heads: int
    d_head: int
    d_state: int
    n_groups: int = 1
    conv_k: int = 4
    chunk_size: int = 64

    def __post_init__(self):
        if self.n_heads % self.n_groups:
            raise ValueError(f"n_groups={self.n_groups} must divide n_heads={self.n_heads}")
        if self.conv_k < 1:
            raise ValueError("conv_k must be >= 1")

    @property
    def d_ssm(self) -> int:
        return self.n_heads * self.d_head

    @property
    def conv_channels(self) -> int:
        return self.d_ssm + 2 * self.n_groups * self.d_state


@dataclass
class SsmParams:
    W_x: Tensor
    W_z: Tensor
    W_B: Tensor
    W_C: Tensor
    W_dt: Tensor
    conv_kernel: Tensor
    conv_bias: Tensor
    b_dt: Tensor
    A_log: Tensor
    D: Tensor
    rms_scale: Tensor
    W_out: Tensor
    shape: SsmShape = field(compare=False)

    def tensors(self) -> dict[str, Tensor]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Tensor)}


def init_ssm_params(rng: np.random.Generator, d_model: int, shape: SsmShape,
                    stds: Mapping[str, float], dtype=np.float64) -> SsmParams:
    """Gaussian projections with the given stds; SSM scalars follow the usual Mamba2 init."""
    H, N, G = shape.n_heads, shape.d_state, shape.n_groups

    def gauss(name, rows, cols):
        return Tensor(rng.standard_normal((rows, cols)) * stds[name], requires_grad=True, dtype=dtype)

    k = shape.conv_k
    dt0 = np.linspace(1e-3, 1e-1, H)
    return SsmParams(
        W_x=gauss("W_x", shape.d_ssm, d_model),
        W_z=gauss("W_z", shape.d_ssm, d_model),
        W_B=gauss("W_B", G * N, d_model),
        W_C=gauss("W_C", G * N, d_model),
        W_dt=gauss("W_dt", H, d_model),
        conv_kernel=Tensor(rng.uniform(-1, 1, (shape.conv_channels, k)) / np.sqrt(k), requires_grad=True, dtype=dtype),
        conv_bias=Tensor(np.zeros(shape.conv_channels), requires_grad=True, dtype=dtype),
        b_dt=Tensor(nx.softplus_inverse_np(dt0), requires_grad=True, dtype=dtype),
        A_log=Tensor(np.log(np.linspace(1.0, 16.0, H)), requires_grad=True, dtype=dtype),
        D=Tensor(np.ones(H), requires_grad=True, dtype=dtype),
        rms_scale=Tensor(np.ones(shape.d_ssm), requires_grad=True, dtype=dtype),
        W_out=gauss("W_out", d_model, shape.d_ssm),
        shape=shape,
    )


def mamba2_block_forward(u: Tensor, params: SsmParams, mults: Mapping[str, float],
                         policy: DtPolicy = DtPolicy(), resets=None, step: int = 0,
                         state: SsmState | None = None, return_state: bool = False,
                         eps: float = 1e-6):
    """u [..., T, d] -> [..., T, d]; optionally also the SsmState after the last token."""
    s = params.shape
    H, P, N, G = s.n_heads, s.d_head, s.d_state, s.n_groups
    x_t = nx.linear(u, params.W_x) * mults["m_x"]
    z_t = nx.linear(u, params.W_z) * mults["m_z"]
    B_t = nx.linear(u, params.W_B) * mults["m_B"]
    C_t = nx.linear(u, params.W_C) * mults["m_C"]
    dt_t = nx.linear(u, params.W_dt) * mults["m_dt"]

    xbc = nx.concat_last([x_t, B_t, C_t])
    conv, tail = causal_conv1d(xbc, params.conv_kernel, params.conv_bias, resets,
                               None if state is None else state.conv_tail)
    xbc = nx.silu(conv)
    x, B, C = nx.split_last(xbc, [s.d_ssm, G * N, G * N])
    dt = apply_dt_policy(nx.softplus(dt_t + params.b_dt), policy, step)

    lead = u.shape[:-1]
    y, final = ssm_scan(x.reshape(*lead, H, P), B.reshape(*lead, G, N), C.reshape(*lead, G, N),
                        dt, params.A_log, params.D, resets=resets, init=state, chunk_size=s.chunk_size)
    y = y.reshape(*lead, s.d_ssm) * nx.silu(z_t)
    y = nx.rmsnorm(y, params.rms_scale, eps=eps, groups=G)
    out = nx.linear(y, params.W_out) * mults["m_SSM"]
    if return_state:
        return out, SsmState(final.hidden, tail)
    return out
